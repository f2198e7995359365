//! Versioned checkpoint container: networks, prior, optimizer state, iteration, RNG and config.

use std::fs;
use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{FmxError, Result};
use crate::nets::Model;
use crate::prior::FactorialPriorState;
use crate::trainer::{AdamState, RngState, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMXC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    /// JSON text of the run configuration that produced this state.
    pub config_json: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.u64(s.iter);
        s.rng.encode(&mut w);
        w.blob(self.config_json.as_bytes());
        s.model.encode_bytes(&mut w);
        s.prior.encode(&mut w);
        s.adam_encoder.encode(&mut w);
        s.adam_decoder.encode(&mut w);
        match &s.adam_prior {
            Some(a) => {
                w.u8(1);
                a.encode(&mut w);
            }
            None => w.u8(0),
        }
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8], source: &str) -> Result<Self> {
        let mut r = ByteReader::new(buf, source);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(r.error("bad magic, expected FMXC"));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let iter = r.u64("iteration")?;
        let rng = RngState::decode(&mut r)?;
        let config_json = String::from_utf8(r.blob("config")?.to_vec())
            .map_err(|_| r.error("config section is not UTF-8"))?;
        let model = Model::decode_bytes(&mut r)?;
        let prior = FactorialPriorState::decode(&mut r)?;
        let adam_encoder = AdamState::decode(&mut r)?;
        let adam_decoder = AdamState::decode(&mut r)?;
        let adam_prior = match r.u8("prior optimizer flag")? {
            0 => None,
            1 => Some(AdamState::decode(&mut r)?),
            v => return Err(r.error(format!("bad prior optimizer flag {v}"))),
        };
        r.expect_end()?;
        if adam_encoder.len() != model.encoder.params().len()
            || adam_decoder.len() != model.decoder.params().len()
        {
            return Err(r.error("optimizer state does not match network sizes"));
        }
        if prior.latent_dim() != model.latent_dim() {
            return Err(r.error("prior latent size does not match the networks"));
        }
        Ok(Self {
            state: TrainState {
                model,
                prior,
                adam_encoder,
                adam_decoder,
                adam_prior,
                iter,
                rng,
            },
            config_json,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| FmxError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| FmxError::io(path, e))?;
        Self::from_bytes(&buf, &path.display().to_string())
    }
}
