//! Trained-network files: layer specs, input layout and metabolite order in a
//! JSON header, followed by every weight and normalisation statistic.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Shape3;
use super::network::{LayerSpec, Network, NetworkConfig};
use super::train::History;
use super::{NnError, Result};
use crate::archive::{self, ArchiveError, PayloadWriter};
use crate::datagen::ConcentrationVector;
use crate::preprocess::{InputConfig, InputTensor};

const MAGIC: &[u8; 8] = b"MRSNET1\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub input: InputConfig,
    /// Output order of the network.
    pub metabolites: Vec<String>,
    pub history: Option<History>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    spec: LayerSpec,
    /// Length of each buffer, in payload order.
    buffers: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Shape3,
    config: Option<NetworkConfig>,
    layers: Vec<LayerEntry>,
    input: InputConfig,
    metabolites: Vec<String>,
    history: Option<History>,
}

impl Checkpoint {
    pub fn new(network: Network, input: InputConfig, metabolites: Vec<String>) -> Result<Self> {
        let (c, h, w) = network.input_shape();
        if c != 1 || h != input.rows() || w != input.bins() {
            return Err(NnError::InvalidConfig(format!(
                "network input {:?} does not match the {} x {} input layout",
                (c, h, w),
                input.rows(),
                input.bins()
            )));
        }
        if metabolites.len() != network.output_dim() {
            return Err(NnError::InvalidConfig(format!(
                "{} metabolites for {} network outputs",
                metabolites.len(),
                network.output_dim()
            )));
        }
        Ok(Self { network, input, metabolites, history: None })
    }

    pub fn with_history(mut self, history: History) -> Self {
        self.history = Some(history);
        self
    }

    fn header(&self) -> Header {
        let layers = self
            .network
            .specs()
            .into_iter()
            .zip(self.network.layers())
            .map(|((name, spec), layer)| LayerEntry { name, spec, buffers: layer.buffers().iter().map(|b| b.len()).collect() })
            .collect();
        Header {
            input_shape: self.network.input_shape(),
            config: self.network.config().copied(),
            layers,
            input: self.input.clone(),
            metabolites: self.metabolites.clone(),
            history: self.history.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let buffers = self.network.buffers();
        let mut w = PayloadWriter::with_capacity(buffers.iter().map(|b| b.len()).sum());
        for b in buffers {
            w.f64s(b);
        }
        archive::encode(MAGIC, VERSION, &self.header(), &w.into_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(ArchiveError::from)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut payload): (Header, _) = archive::decode(bytes, MAGIC, VERSION)?;
        let specs: Vec<(String, LayerSpec)> = header.layers.iter().map(|l| (l.name.clone(), l.spec.clone())).collect();
        let mut network = Network::from_specs(header.input_shape, &specs, 0)
            .map_err(|e| ArchiveError::format(0, format!("layer specs: {e}")))?;
        network.set_config(header.config);
        let expected: Vec<usize> = header.layers.iter().flat_map(|l| l.buffers.iter().copied()).collect();
        let offset = payload.offset();
        let mut buffers = network.buffers_mut();
        if buffers.len() != expected.len() || buffers.iter().zip(&expected).any(|(b, &n)| b.len() != n) {
            return Err(ArchiveError::format(offset, "buffer sizes do not match the layer specs").into());
        }
        for b in buffers.iter_mut() {
            let values = payload.f64s(b.len())?;
            b.copy_from_slice(&values);
        }
        payload.finish()?;
        drop(buffers);
        let ckpt = Checkpoint::new(network, header.input, header.metabolites)
            .map_err(|e| ArchiveError::format(0, e.to_string()))?;
        Ok(match header.history {
            Some(h) => ckpt.with_history(h),
            None => ckpt,
        })
    }

    /// Relative concentrations for one assembled input.
    pub fn predict(&self, x: &InputTensor) -> Result<ConcentrationVector> {
        let p = self.network.predict_tensor(x)?;
        let pairs = self.metabolites.iter().cloned().zip(p.into_iter().map(|v| v.clamp(0.0, 1.0)));
        Ok(ConcentrationVector::new(pairs).expect("metabolite names are unique"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(ArchiveError::from)?;
        Self::from_bytes(&bytes)
    }
}
