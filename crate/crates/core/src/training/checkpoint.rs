//! Checkpoint container: `DIMRCKPT`, a `u32` format version, a length-prefixed
//! UTF-8 manifest, then one serialized tensor per manifest `tensor` line.
//!
//! Manifest layout:
//!
//! ```text
//! step = 2000
//! schedule = linear 1000 0.0001 0.02
//! config seed = 0
//! config model.layers = 4,2,2
//! ...
//! tensor param/b1.patchify.kernel
//! tensor adam.m/b1.patchify.kernel
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Cursor, Tensor};
use crate::params::ParamStore;
use crate::training::config::RunConfig;
use crate::training::optim::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DIMRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub ema: Option<ParamStore<f32>>,
}

fn schedule_line(cfg: &RunConfig) -> String {
    let d = &cfg.diffusion;
    format!("linear {} {:?} {:?}", d.steps, d.beta_start, d.beta_end)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("step = {}\nschedule = {}\n", self.step, schedule_line(&self.config));
        for line in self.config.to_text().lines() {
            manifest.push_str("config ");
            manifest.push_str(line);
            manifest.push('\n');
        }
        let mut sections: Vec<(&str, &[Tensor<f32>])> =
            vec![("param", self.params.tensors()), ("adam.m", &self.adam.m), ("adam.v", &self.adam.v)];
        if let Some(e) = &self.ema {
            sections.push(("ema", e.tensors()));
        }
        let mut blobs: Vec<&Tensor<f32>> = Vec::new();
        for (prefix, tensors) in sections {
            for (n, t) in self.params.names().iter().zip(tensors) {
                manifest.push_str(&format!("tensor {prefix}/{n}\n"));
                blobs.push(t);
            }
        }
        manifest.push_str(&format!("adam.step = {}\n", self.adam.step));
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in blobs {
            out.extend_from_slice(&t.to_bytes());
        }
        out
    }

    /// Parses a checkpoint. Parameter names must match a freshly built network
    /// for the echoed configuration, checked by the caller via
    /// [`Checkpoint::validate_names`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
        let manifest = std::str::from_utf8(cur.take(len)?).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
        let mut step = None;
        let mut adam_step = None;
        let mut config_lines = String::new();
        let mut tensors: Vec<String> = Vec::new();
        for line in manifest.lines() {
            if let Some(rest) = line.strip_prefix("config ") {
                config_lines.push_str(rest);
                config_lines.push('\n');
            } else if let Some(name) = line.strip_prefix("tensor ") {
                tensors.push(name.to_string());
            } else if let Some(v) = line.strip_prefix("step = ") {
                step = Some(v.parse::<u64>().map_err(|_| Error::Format(format!("bad step {v:?}")))?);
            } else if let Some(v) = line.strip_prefix("adam.step = ") {
                adam_step = Some(v.parse::<u64>().map_err(|_| Error::Format(format!("bad adam.step {v:?}")))?);
            } else if !line.starts_with("schedule = ") {
                return Err(Error::Format(format!("unexpected manifest line {line:?}")));
            }
        }
        let config = RunConfig::parse(&config_lines).map_err(|e| Error::Format(format!("config echo: {e}")))?;
        let mut params = ParamStore::default();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut ema: Option<ParamStore<f32>> = None;
        for name in &tensors {
            let (t, used) = Tensor::<f32>::from_bytes(&bytes[cur.pos..])?;
            cur.pos += used;
            let (section, path) = name.split_once('/').ok_or_else(|| Error::Format(format!("bad tensor name {name:?}")))?;
            match section {
                "param" => {
                    params.insert(path, t)?;
                }
                "adam.m" => m.push((path.to_string(), t)),
                "adam.v" => v.push((path.to_string(), t)),
                "ema" => {
                    ema.get_or_insert_with(ParamStore::default).insert(path, t)?;
                }
                _ => return Err(Error::Format(format!("unknown tensor section {section:?}"))),
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        let aligned = |xs: &[(String, Tensor<f32>)]| xs.len() == params.len() && xs.iter().zip(params.names()).all(|(a, b)| &a.0 == b);
        if !aligned(&m) || !aligned(&v) {
            return Err(Error::Format("optimizer moments do not align with parameters".into()));
        }
        if let Some(e) = &ema {
            if e.names() != params.names() {
                return Err(Error::Format("EMA tensors do not align with parameters".into()));
            }
        }
        Ok(Checkpoint {
            config,
            step: step.ok_or_else(|| Error::Format("manifest lacks step".into()))?,
            adam: AdamState {
                step: adam_step.ok_or_else(|| Error::Format("manifest lacks adam.step".into()))?,
                m: m.into_iter().map(|x| x.1).collect(),
                v: v.into_iter().map(|x| x.1).collect(),
            },
            params,
            ema,
        })
    }

    /// Confirms the stored tensors have exactly the names and shapes of `fresh`.
    pub fn validate_names(&self, fresh: &ParamStore<f32>) -> Result<()> {
        if self.params.names() != fresh.names() {
            return Err(Error::Format("checkpoint parameters do not match the configured network".into()));
        }
        for (a, b) in self.params.tensors().iter().zip(fresh.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Format(format!("parameter shape {:?} vs expected {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Dimr;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint(ema: bool) -> Checkpoint {
        let config = RunConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamStore::default();
        Dimr::new(config.model.clone(), 1000, &mut params, &mut rng).unwrap();
        let mut adam = AdamState::new(&params);
        adam.step = 7;
        adam.m[0] = Tensor::randn(adam.m[0].shape(), 1.0, &mut rng);
        Checkpoint { config, step: 7, ema: ema.then(|| params.clone()), params, adam }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for ema in [false, true] {
            let ck = sample_checkpoint(ema);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample_checkpoint(false).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
