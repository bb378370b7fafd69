//! Record of the operations run by a forward pass, consumed by the matching
//! backward pass.

use crate::error::{Error, Result};

/// Identifies one recorded operation of a backbone forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpId {
    Stem,
    Block { stage: usize, index: usize },
    Downsample { stage: usize },
    Head,
}

impl std::fmt::Display for OpId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OpId::Stem => write!(f, "stem"),
            OpId::Block { stage, index } => write!(f, "stage{stage}.block{index}"),
            OpId::Downsample { stage } => write!(f, "downsample{stage}"),
            OpId::Head => write!(f, "head"),
        }
    }
}

/// Saved activations of one forward pass. `signature` identifies the
/// structure of the model that produced it.
#[derive(Debug)]
pub struct GradTape<S> {
    signature: u64,
    entries: Vec<(OpId, S)>,
}

impl<S> GradTape<S> {
    pub fn new(signature: u64) -> Self {
        GradTape { signature, entries: Vec::new() }
    }

    pub fn record(&mut self, op: OpId, saved: S) {
        self.entries.push((op, saved));
    }

    pub fn signature(&self) -> u64 {
        self.signature
    }

    pub fn ops(&self) -> impl Iterator<Item = OpId> + '_ {
        self.entries.iter().map(|(op, _)| *op)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Consumes the tape after verifying that it was produced by a model with
    /// `signature` running exactly `expected` in order. Entries come back in
    /// reverse (backward) order.
    pub fn unwind(self, signature: u64, expected: &[OpId]) -> Result<Vec<(OpId, S)>> {
        if self.signature != signature {
            return Err(Error::Usage(format!(
                "tape was recorded by a different model (signature {:#x}, expected {:#x})",
                self.signature, signature
            )));
        }
        let ops: Vec<OpId> = self.ops().collect();
        if ops != expected {
            let at = ops.iter().zip(expected).position(|(a, b)| a != b).unwrap_or(ops.len().min(expected.len()));
            return Err(Error::Usage(format!(
                "tape holds {} ops, expected {}; first mismatch at position {at}",
                ops.len(),
                expected.len()
            )));
        }
        let mut entries = self.entries;
        entries.reverse();
        Ok(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unwind_checks_signature_and_order() {
        let mut t = GradTape::new(7);
        t.record(OpId::Stem, 1);
        t.record(OpId::Head, 2);
        let back = t.unwind(7, &[OpId::Stem, OpId::Head]).unwrap();
        assert_eq!(back, vec![(OpId::Head, 2), (OpId::Stem, 1)]);

        let mut t = GradTape::new(7);
        t.record(OpId::Stem, 1);
        assert!(matches!(t.unwind(8, &[OpId::Stem]), Err(Error::Usage(_))));
        let mut t = GradTape::new(7);
        t.record(OpId::Stem, 1);
        assert!(matches!(t.unwind(7, &[OpId::Head]), Err(Error::Usage(_))));
    }
}
