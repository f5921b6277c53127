//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TPNC" | u32 version | u32 len + config hash (ASCII)
//! u64 seed | u32 input_dim | u32 num_classes | u32 base_width | u8 use_norm
//! tensor head_weight | tensor head_bias | u32 stage count
//! per stage:
//!   u32 n_nodes | u32 width_in | u32 width_out
//!   u32 edge count | (u32 from, u32 to) per edge
//!   n_nodes^2 x f32 alpha (row = destination)
//!   per internal node: tensor weight | tensor bias | u8 has_norm
//!     [tensor scale | tensor shift | u32 width | f32 mean.. | f32 var..]
//! tensor classifier_weight | tensor classifier_bias | u32 epoch
//! ```
//!
//! A tensor is `u32 rows | u32 cols | rows*cols x f32`.

use std::fs;
use std::path::Path;

use crate::autodiff::{RunningStats, Tensor};
use crate::graph::Graph;
use crate::network::{Network, NetworkSpec, NetworkState, NodeState, NormState, StageState};

use super::HarnessError;

pub const MAGIC: &[u8; 4] = b"TPNC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Completed training epochs when the checkpoint was taken.
    pub epoch: u32,
    pub state: NetworkState,
}

impl Checkpoint {
    pub fn new(net: &Network, config_hash: &str, epoch: usize) -> Self {
        Checkpoint { config_hash: config_hash.to_string(), epoch: epoch as u32, state: net.to_state() }
    }

    pub fn network(&self) -> Result<Network, HarnessError> {
        Ok(Network::from_state(self.state.clone())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(self.config_hash.len() as u32);
        w.0.extend_from_slice(self.config_hash.as_bytes());
        let s = &self.state;
        w.0.extend(s.seed.to_le_bytes());
        w.u32(s.spec.input_dim as u32);
        w.u32(s.spec.num_classes as u32);
        w.u32(s.spec.base_width as u32);
        w.0.push(s.spec.use_norm as u8);
        w.tensor(&s.head_weight);
        w.tensor(&s.head_bias);
        w.u32(s.stages.len() as u32);
        for st in &s.stages {
            w.u32(st.graph.n_nodes() as u32);
            w.u32(st.width_in as u32);
            w.u32(st.width_out as u32);
            w.u32(st.graph.edge_count() as u32);
            for e in st.graph.edges() {
                w.u32(e.from as u32);
                w.u32(e.to as u32);
            }
            w.f32s(st.alpha.data());
            for node in &st.nodes {
                w.tensor(&node.weight);
                w.tensor(&node.bias);
                match &node.norm {
                    None => w.0.push(0),
                    Some(m) => {
                        w.0.push(1);
                        w.tensor(&m.scale);
                        w.tensor(&m.shift);
                        w.u32(m.stats.mean.len() as u32);
                        w.f32s(&m.stats.mean);
                        w.f32s(&m.stats.var);
                    }
                }
            }
        }
        w.tensor(&s.classifier_weight);
        w.tensor(&s.classifier_bias);
        w.u32(self.epoch);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(HarnessError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(HarnessError::Checkpoint(format!("unsupported version {version}")));
        }
        let hash_len = r.u32()? as usize;
        let config_hash = String::from_utf8(r.take(hash_len)?.to_vec())
            .map_err(|_| HarnessError::Checkpoint("config hash is not UTF-8".into()))?;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let spec = NetworkSpec {
            input_dim: r.u32()? as usize,
            num_classes: r.u32()? as usize,
            base_width: r.u32()? as usize,
            use_norm: r.flag()?,
        };
        let head_weight = r.tensor()?;
        let head_bias = r.tensor()?;
        let stage_count = r.u32()? as usize;
        let mut stages = Vec::new();
        for _ in 0..stage_count {
            let n = r.u32()? as usize;
            let width_in = r.u32()? as usize;
            let width_out = r.u32()? as usize;
            let edge_count = r.u32()? as usize;
            let mut edges = Vec::new();
            for _ in 0..edge_count {
                edges.push((r.u32()? as usize, r.u32()? as usize));
            }
            let graph = Graph::new(n, &edges).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
            if graph.edge_count() != edge_count {
                return Err(HarnessError::Checkpoint("duplicate edges".into()));
            }
            let alpha = Tensor::from_vec(n, n, r.f32s(n.checked_mul(n).ok_or_else(truncated)?)?).expect("sized");
            let mut nodes = Vec::new();
            for _ in 0..n.saturating_sub(2) {
                let weight = r.tensor()?;
                let bias = r.tensor()?;
                let norm = if r.flag()? {
                    let scale = r.tensor()?;
                    let shift = r.tensor()?;
                    let width = r.u32()? as usize;
                    let mean = r.f32s(width)?;
                    let var = r.f32s(width)?;
                    Some(NormState { scale, shift, stats: RunningStats { mean, var } })
                } else {
                    None
                };
                nodes.push(NodeState { weight, bias, norm });
            }
            stages.push(StageState { graph, alpha, width_in, width_out, nodes });
        }
        let classifier_weight = r.tensor()?;
        let classifier_bias = r.tensor()?;
        let epoch = r.u32()?;
        if r.pos != bytes.len() {
            return Err(HarnessError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let state = NetworkState { spec, seed, head_weight, head_bias, stages, classifier_weight, classifier_bias };
        // validates every shape and width
        Network::from_state(state.clone()).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        Ok(Checkpoint { config_hash, epoch, state })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }

    fn f32s(&mut self, values: &[f32]) {
        for v in values {
            self.0.extend(v.to_le_bytes());
        }
    }

    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.rows() as u32);
        self.u32(t.cols() as u32);
        self.f32s(t.data());
    }
}

fn truncated() -> HarnessError {
    HarnessError::Checkpoint("unexpected end of checkpoint".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool, HarnessError> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(HarnessError::Checkpoint(format!("invalid flag byte {b}"))),
        }
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, HarnessError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(truncated)?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn tensor(&mut self) -> Result<Tensor<f32>, HarnessError> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let data = self.f32s(rows.checked_mul(cols).ok_or_else(truncated)?)?;
        Ok(Tensor::from_vec(rows, cols, data).expect("sized"))
    }
}
