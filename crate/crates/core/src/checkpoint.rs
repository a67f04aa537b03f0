//! Checkpoint files: a `key = value` header (config echo, epoch, RNG state,
//! tensor manifest) ending in a `---` line, then one `TNSR` record per
//! parameter tensor in manifest order.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::rngs::mock::StepRng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &str = "ADAHEAD-CHECKPOINT 1";
const HEADER_END: &str = "---";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Completed epochs; 0 for the initial weights.
    pub epoch: usize,
    pub rng_seed: u64,
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    /// Training hyperparameters as `key = value` lines, kept for reference.
    pub train_echo: Vec<(String, String)>,
}

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

impl Checkpoint {
    pub fn header(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "epoch = {}", self.epoch);
        let _ = writeln!(s, "rng.seed = {}", self.rng_seed);
        let _ = writeln!(s, "rng.stream = {}", self.rng_stream);
        let _ = writeln!(s, "rng.word_pos = {}", self.rng_word_pos);
        s.push_str(&self.model.config.to_kv("model."));
        for (k, v) in &self.train_echo {
            let _ = writeln!(s, "train.{k} = {v}");
        }
        let tensors = self.model.tensors();
        let _ = writeln!(s, "tensors = {}", tensors.len());
        for (i, (name, t)) in tensors.iter().enumerate() {
            let _ = writeln!(s, "tensor.{i:03} = {name} {}", shape_str(t.shape()));
        }
        let _ = writeln!(s, "{HEADER_END}");
        s
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(self.header().as_bytes())?;
        for (_, t) in self.model.tensors() {
            t.write_tnsr(w)?;
        }
        Ok(())
    }

    /// Writes to a sibling temporary file, then renames over `path`, so an
    /// interrupted save leaves the previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f), path)
    }

    pub fn read_from<R: BufRead>(r: &mut R, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut header = String::new();
        let mut n_lines = 0;
        loop {
            let mut line = String::new();
            let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            n_lines += 1;
            if n == 0 {
                return Err(bad(n_lines, "checkpoint header is not terminated".into()));
            }
            if n_lines == 1 {
                if line.trim_end() != MAGIC {
                    return Err(bad(
                        1,
                        format!("not a checkpoint (magic {:?})", line.trim_end()),
                    ));
                }
                header.push('\n');
                continue;
            }
            if line.trim_end() == HEADER_END {
                break;
            }
            header.push_str(&line);
        }
        let mut kv = KeyValues::parse(path, &header)?;
        let missing = |k: &str| bad(0, format!("missing header key {k:?}"));
        let epoch = kv.take("epoch")?.ok_or_else(|| missing("epoch"))?;
        let rng_seed = kv.take("rng.seed")?.ok_or_else(|| missing("rng.seed"))?;
        let rng_stream = kv
            .take("rng.stream")?
            .ok_or_else(|| missing("rng.stream"))?;
        let rng_word_pos = kv
            .take("rng.word_pos")?
            .ok_or_else(|| missing("rng.word_pos"))?;
        let config = ModelConfig::from_kv(&mut kv, "model.")?;
        let train_echo = kv
            .take_prefix("train.")
            .into_iter()
            .map(|(k, v)| (k["train.".len()..].to_string(), v))
            .collect();
        let count: usize = kv.take("tensors")?.ok_or_else(|| missing("tensors"))?;
        let manifest = kv.take_prefix("tensor.");
        kv.finish()?;

        let mut model = Model::init(&mut StepRng::new(0, 0), config)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if count != expected.len() || manifest.len() != expected.len() {
            return Err(bad(
                0,
                format!(
                    "manifest lists {} tensors, model has {}",
                    manifest.len(),
                    expected.len()
                ),
            ));
        }
        for ((_, entry), (name, shape)) in manifest.iter().zip(&expected) {
            let want = format!("{name} {}", shape_str(shape));
            if entry != &want {
                return Err(bad(
                    0,
                    format!("manifest entry {entry:?}, expected {want:?}"),
                ));
            }
        }
        let mut loaded = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let t = Tensor::read_tnsr(r).map_err(|e| bad(0, format!("tensor {name}: {e}")))?;
            if t.shape() != shape.as_slice() {
                return Err(bad(
                    0,
                    format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    ),
                ));
            }
            loaded.push(t);
        }
        for (dst, src) in model.tensors_mut().into_iter().zip(loaded) {
            *dst = src;
        }
        Ok(Self {
            model,
            epoch,
            rng_seed,
            rng_stream,
            rng_word_pos,
            train_echo,
        })
    }
}
