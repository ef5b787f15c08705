//! Knowledge-tree attention mask.
//!
//! A token may attend to tokens of its own node, its parent, its children
//! and its siblings (nodes with the same non-null parent). Everything else
//! is masked with [`MASKED`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ktree::{KnowledgeTree, NodeId};

/// Additive value of an invisible pair. Finite, so a fully masked row
/// could never produce NaN; large enough that `exp` underflows to exactly
/// zero in both f32 and f64.
pub const MASKED: f64 = -1e9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("node id {0} is not in the tree")]
    InvalidNode(NodeId),
    #[error("token {0} is not covered by any node span")]
    Uncovered(usize),
    #[error("malformed mask bytes: {0}")]
    Decode(String),
}

pub fn node_visible(tree: &KnowledgeTree, a: NodeId, b: NodeId) -> Result<bool, MaskError> {
    let na = tree.node(a).ok_or(MaskError::InvalidNode(a))?;
    let nb = tree.node(b).ok_or(MaskError::InvalidNode(b))?;
    Ok(a == b
        || na.parent == Some(b)
        || nb.parent == Some(a)
        || (na.parent.is_some() && na.parent == nb.parent))
}

/// Square boolean visibility matrix, bit-packed row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MaskMatrix {
    size: usize,
    bits: Vec<u8>,
}

impl MaskMatrix {
    fn empty(size: usize) -> Self {
        Self {
            size,
            bits: vec![0; (size * size).div_ceil(8)],
        }
    }

    /// Everything visible, i.e. plain bidirectional attention.
    pub fn full(size: usize) -> Self {
        let mut m = Self::empty(size);
        for i in 0..size * size {
            m.bits[i / 8] |= 1 << (i % 8);
        }
        m
    }

    /// Entry `(i, j)` visible iff `f(i, j)`.
    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(size);
        for i in 0..size {
            for j in 0..size {
                if f(i, j) {
                    m.set(i, j);
                }
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn visible(&self, i: usize, j: usize) -> bool {
        let k = i * self.size + j;
        self.bits[k / 8] >> (k % 8) & 1 == 1
    }

    fn set(&mut self, i: usize, j: usize) {
        let k = i * self.size + j;
        self.bits[k / 8] |= 1 << (k % 8);
    }

    /// `0` where visible, [`MASKED`] otherwise.
    pub fn additive(&self, i: usize, j: usize) -> f64 {
        if self.visible(i, j) {
            0.0
        } else {
            MASKED
        }
    }

    pub fn visible_pairs(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Wire form: little-endian `u32` side length followed by the packed
    /// row-major bits (bit `k % 8` of byte `k / 8` is entry `k`).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.bits.len());
        out.extend_from_slice(&(self.size as u32).to_le_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MaskError> {
        let header: [u8; 4] = bytes
            .get(..4)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| MaskError::Decode("missing length header".into()))?;
        let size = u32::from_le_bytes(header) as usize;
        let bits = bytes[4..].to_vec();
        if bits.len() != (size * size).div_ceil(8) {
            return Err(MaskError::Decode(format!(
                "{} payload bytes for a {size}x{size} mask",
                bits.len()
            )));
        }
        Ok(Self { size, bits })
    }
}

impl From<MaskMatrix> for String {
    fn from(m: MaskMatrix) -> String {
        use base64::Engine;
        base64::engine::general_purpose::STANDARD.encode(m.to_bytes())
    }
}

impl TryFrom<String> for MaskMatrix {
    type Error = MaskError;

    fn try_from(s: String) -> Result<Self, MaskError> {
        use base64::Engine;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(|e| MaskError::Decode(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

/// Expands node visibility to token level for a sequence of `length`
/// tokens. Every position must be owned by some node.
pub fn build_mask(tree: &KnowledgeTree, length: usize) -> Result<MaskMatrix, MaskError> {
    let owners = tree.token_owners(length);
    let owners: Vec<NodeId> = owners
        .into_iter()
        .enumerate()
        .map(|(i, o)| o.ok_or(MaskError::Uncovered(i)))
        .collect::<Result<_, _>>()?;

    let n = tree.len();
    let mut node_vis = vec![false; n * n];
    for a in 0..n {
        for b in 0..n {
            node_vis[a * n + b] = node_visible(tree, a, b)?;
        }
    }

    let mut m = MaskMatrix::empty(length);
    for (i, &a) in owners.iter().enumerate() {
        for (j, &b) in owners.iter().enumerate() {
            if node_vis[a * n + b] {
                m.set(i, j);
            }
        }
    }
    Ok(m)
}
