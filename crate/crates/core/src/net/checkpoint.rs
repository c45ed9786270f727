//! Checkpoint container: `OSCK` magic, u32 version, u64 header length, JSON
//! header, then a little-endian f32 blob of parameters (and optionally the two
//! Adam moment buffers) in layout order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamState, AdamWConfig};
use super::{Denoiser, NetConfig};
use crate::error::{Error, Result};
use crate::grid::Dims;
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"OSCK";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

/// Training settings a checkpoint was produced with; resume insists they match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub manifest: String,
    #[serde(rename = "S")]
    pub n_steps: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    /// Losses of the first (up to) ten updates.
    pub first: Vec<f64>,
    /// Losses of the latest (up to) ten updates.
    pub last: Vec<f64>,
}

impl LossSummary {
    pub const WINDOW: usize = 10;

    pub fn from_history(losses: &[f64]) -> Self {
        let w = Self::WINDOW.min(losses.len());
        LossSummary {
            first: losses[..w].to_vec(),
            last: losses[losses.len() - w..].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub net: NetConfig,
    pub data_dims: Dims,
    pub train: TrainRecord,
    /// Completed optimizer updates.
    pub step: u64,
    pub loss: LossSummary,
    pub norm_stats_path: String,
    pub param_count: usize,
    pub has_optimizer_state: bool,
    pub blob_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    /// Snapshot a network (and optionally its optimizer) into f32 storage.
    /// `header.param_count`, `has_optimizer_state` and `blob_sha256` are filled in here.
    pub fn capture<R: Real>(
        mut header: CheckpointHeader,
        net: &Denoiser<R>,
        adam: Option<&AdamState<R>>,
    ) -> Self {
        let to32 = |v: &[R]| v.iter().map(|x| x.f64() as f32).collect::<Vec<f32>>();
        let params = to32(net.params());
        let adam = adam.map(|a| AdamState { m: to32(&a.m), v: to32(&a.v), step: a.step });
        header.net = net.config().clone();
        header.param_count = params.len();
        header.has_optimizer_state = adam.is_some();
        let mut ck = Checkpoint { header, params, adam };
        ck.header.blob_sha256 = crate::synth::sha256_hex(&ck.blob());
        ck
    }

    fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.params.len() * 12);
        let mut put = |v: &[f32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(&self.params);
        if let Some(a) = &self.adam {
            put(&a.m);
            put(&a.v);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("checkpoint header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.blob());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound { what: "checkpoint", path: path.to_path_buf() },
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < PREFIX_LEN || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[PREFIX_LEN..];
        if hlen > body.len() {
            return Err(Error::format(path, "header length exceeds file size"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])
            .map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        let blob = &body[hlen..];
        let buffers = if header.has_optimizer_state { 3 } else { 1 };
        if blob.len() != header.param_count * buffers * 4 {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                msg: format!("blob is {} bytes, header implies {}", blob.len(), header.param_count * buffers * 4),
            });
        }
        let digest = crate::synth::sha256_hex(blob);
        if digest != header.blob_sha256 {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                msg: format!("blob sha256 {digest} does not match header {}", header.blob_sha256),
            });
        }
        let floats: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let n = header.param_count;
        let params = floats[..n].to_vec();
        let adam = header.has_optimizer_state.then(|| AdamState {
            m: floats[n..2 * n].to_vec(),
            v: floats[2 * n..].to_vec(),
            step: header.step,
        });
        Ok(Checkpoint { header, params, adam })
    }

    pub fn denoiser<R: Real>(&self) -> Result<Denoiser<R>> {
        Denoiser::from_params(
            self.header.net.clone(),
            self.params.iter().map(|&v| R::of(v as f64)).collect(),
        )
    }

    pub fn adam_state<R: Real>(&self) -> Option<AdamState<R>> {
        self.adam.as_ref().map(|a| AdamState {
            m: a.m.iter().map(|&v| R::of(v as f64)).collect(),
            v: a.v.iter().map(|&v| R::of(v as f64)).collect(),
            step: a.step,
        })
    }

    /// SHA-256 of the whole serialized file.
    pub fn file_hash(&self) -> String {
        crate::synth::sha256_hex(&self.to_bytes())
    }
}
