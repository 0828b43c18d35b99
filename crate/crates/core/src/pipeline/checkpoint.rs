//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "LSWPCKPT"
//! version    u32
//! manifest   u64 length, then UTF-8 JSON
//! count      u32 number of tensors
//! tensor*    u32 name length, name, u32 rank, rank x u64 dims,
//!            u64 byte length, row-major f32 data
//! ```
//!
//! Tensors are written in name order. Parameter tensors use their network
//! names (`gen/...`, `inv/...`, `latent/mean`, ...); optimizer moments are
//! stored as `optim/<g|d>/<m|v>/<parameter name>`.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::optim::{Adam, Moment};
use super::train::TrainState;
use crate::error::{Error, Result};
use crate::perception::ProviderRegistry;

pub const MAGIC: &[u8; 8] = b"LSWPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LatentShape {
    num_vectors: usize,
    width: usize,
    split_index: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: Config,
    iteration: u64,
    pretrain_iterations: u64,
    generator_optimizer_steps: u64,
    discriminator_optimizer_steps: u64,
    rng: RngState,
    latent: LatentShape,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Checkpoint(format!("malformed RNG seed `{s}`"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

fn optimizer_tensors(prefix: &str, opt: &Adam, out: &mut BTreeMap<String, Tensor>) {
    let (m, v) = opt.moments();
    for (name, t) in m {
        out.insert(format!("optim/{prefix}/m/{name}"), t.clone());
    }
    for (name, t) in v {
        out.insert(format!("optim/{prefix}/v/{name}"), t.clone());
    }
}

/// Serializes the full training state.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let g = state.models.generator_config();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        iteration: state.iteration,
        pretrain_iterations: state.pretrain_iterations,
        generator_optimizer_steps: state.opt_g.step_count(),
        discriminator_optimizer_steps: state.opt_d.step_count(),
        rng: RngState {
            seed: hex(&state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        latent: LatentShape {
            num_vectors: g.num_latent_vectors(),
            width: g.latent_width,
            split_index: state.models.split_index(),
        },
    };
    let mut tensors: BTreeMap<String, Tensor> = state
        .models
        .all_vars()
        .into_iter()
        .map(|(k, v)| (k, v.as_tensor().clone()))
        .collect();
    optimizer_tensors("g", &state.opt_g, &mut tensors);
    optimizer_tensors("d", &state.opt_d, &mut tensors);

    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        out.extend_from_slice(&((data.len() * 4) as u64).to_le_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| Error::Checkpoint(format!("corrupt length {n} for {what}")))
    }
}

/// Restores a training state, rebuilding providers from `registry`.
pub fn decode_checkpoint(bytes: &[u8], registry: &ProviderRegistry) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let json_len = r.len("manifest length")?;
    let manifest: Manifest = serde_json::from_slice(r.take(json_len, "manifest")?)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint("manifest version disagrees with header".into()));
    }

    let mut state = TrainState::with_registry(manifest.config.clone(), registry)?;
    let g = state.models.generator_config();
    let shape = LatentShape {
        num_vectors: g.num_latent_vectors(),
        width: g.latent_width,
        split_index: state.models.split_index(),
    };
    if shape != manifest.latent {
        return Err(Error::Checkpoint(format!(
            "latent shape {:?} does not match the configured models {:?}",
            manifest.latent, shape
        )));
    }
    let vars = state.models.all_vars();
    let count = r.u32("tensor count")? as usize;
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("corrupt rank {rank} for `{name}`")));
        }
        let dims = (0..rank).map(|_| r.len("tensor dims")).collect::<Result<Vec<_>>>()?;
        let byte_len = r.len("tensor byte length")?;
        let elems: usize = dims.iter().product();
        if byte_len != elems * 4 {
            return Err(Error::Checkpoint(format!(
                "corrupt length for `{name}`: {byte_len} bytes for dims {dims:?}"
            )));
        }
        let raw = r.take(byte_len, &name)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::from_vec(data, dims.as_slice(), &Device::Cpu)?;
        if let Some(var) = vars.get(&name) {
            if var.as_tensor().dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.as_tensor().dims()
                )));
            }
            var.set(&t.to_dtype(var.as_tensor().dtype())?)?;
        } else if let Some(rest) = name.strip_prefix("optim/") {
            let mut parts = rest.splitn(3, '/');
            let (which, moment, param) = (parts.next(), parts.next(), parts.next());
            let opt = match which {
                Some("g") => &mut state.opt_g,
                Some("d") => &mut state.opt_d,
                _ => return Err(Error::Checkpoint(format!("unknown tensor `{name}`"))),
            };
            let moment = match moment {
                Some("m") => Moment::First,
                Some("v") => Moment::Second,
                _ => return Err(Error::Checkpoint(format!("unknown tensor `{name}`"))),
            };
            opt.set_moment(moment, param.unwrap_or_default(), t)
                .map_err(|_| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        } else {
            return Err(Error::Checkpoint(format!("unknown tensor `{name}`")));
        }
        seen.insert(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if let Some(missing) = vars.keys().find(|k| !seen.contains(*k)) {
        return Err(Error::Checkpoint(format!("missing tensor `{missing}`")));
    }

    state.iteration = manifest.iteration;
    state.pretrain_iterations = manifest.pretrain_iterations;
    state.opt_g.set_step_count(manifest.generator_optimizer_steps);
    state.opt_d.set_step_count(manifest.discriminator_optimizer_steps);
    let mut rng = ChaCha8Rng::from_seed(unhex(&manifest.rng.seed)?);
    rng.set_stream(manifest.rng.stream);
    rng.set_word_pos(
        manifest
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("malformed RNG position".into()))?,
    );
    state.rng = rng;
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    load_checkpoint_with(path, &ProviderRegistry::with_defaults())
}

pub fn load_checkpoint_with(path: &Path, registry: &ProviderRegistry) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, registry).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::{toy_dataset, toy_face};
    use crate::pipeline::models::swap_image;
    use crate::pipeline::train::train_iteration;

    fn trained_state() -> TrainState {
        let mut cfg = Config::default();
        cfg.model.resolution = 32;
        cfg.model.heatmap_grid = 16;
        cfg.train.batch_size = 2;
        cfg.train.seed = 4;
        let mut state = TrainState::new(cfg).unwrap();
        let ds = toy_dataset(3, 32, 1).unwrap();
        train_iteration(&mut state, &ds).unwrap();
        state
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let state = trained_state();
        let a = encode_checkpoint(&state).unwrap();
        let restored = decode_checkpoint(&a, &ProviderRegistry::with_defaults()).unwrap();
        let b = encode_checkpoint(&restored).unwrap();
        assert_eq!(a, b);
        assert_eq!(restored.iteration, 1);
    }

    #[test]
    fn restored_models_swap_identically_and_resume() {
        let mut state = trained_state();
        let bytes = encode_checkpoint(&state).unwrap();
        let mut restored = decode_checkpoint(&bytes, &ProviderRegistry::with_defaults()).unwrap();
        let (xs, ls, _) = toy_face(1, 32).unwrap();
        let (xt, lt, mt) = toy_face(2, 32).unwrap();
        let a = swap_image(&state.models, &xs, &xt, &mt, &ls, &lt).unwrap();
        let b = swap_image(&restored.models, &xs, &xt, &mt, &ls, &lt).unwrap();
        assert_eq!(a.final_image.to_vec().unwrap(), b.final_image.to_vec().unwrap());
        assert_eq!(a.side_output.to_vec().unwrap(), b.side_output.to_vec().unwrap());
        // continued training stays in lockstep
        let ds = toy_dataset(3, 32, 1).unwrap();
        let ra = train_iteration(&mut state, &ds).unwrap();
        let rb = train_iteration(&mut restored, &ds).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(encode_checkpoint(&state).unwrap(), encode_checkpoint(&restored).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_checkpoint(&trained_state()).unwrap();
        let reg = ProviderRegistry::with_defaults();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut], &reg), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        let err = decode_checkpoint(&wrong, &reg).unwrap_err();
        assert!(err.to_string().contains("version"));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&magic, &reg), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn unknown_tensor_is_rejected() {
        let state = trained_state();
        let mut bytes = encode_checkpoint(&state).unwrap();
        // rename the first tensor: it follows the header, manifest and count
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let name_at = 20 + json_len + 4 + 4;
        bytes[name_at] = b'z';
        let err = decode_checkpoint(&bytes, &ProviderRegistry::with_defaults()).unwrap_err();
        assert!(err.to_string().contains("unknown tensor"), "{err}");
    }
}
