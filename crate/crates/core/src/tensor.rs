//! Dense row-major tensors and the global precision switch.
//!
//! Values are held as `f64`. In [`Precision::F32`] mode every kernel output
//! is rounded to the nearest `f32` and matrix products run in single
//! precision, so the arithmetic matches a 32-bit runtime. [`Precision::F64`]
//! is the test mode used by gradient checks.

use std::cell::Cell;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Reads `ADAHEAD_PRECISION` (`f32` or `f64`); defaults to `f32`.
    pub fn from_env() -> Result<Self> {
        match std::env::var("ADAHEAD_PRECISION") {
            Ok(v) => v.parse(),
            Err(_) => Ok(Precision::F32),
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "unknown precision `{other}` (expected f32 or f64)"
            ))),
        }
    }
}

thread_local! {
    static PRECISION: Cell<Option<Precision>> = const { Cell::new(None) };
}

/// Precision in effect on the current thread.
pub fn precision() -> Precision {
    PRECISION.with(|p| match p.get() {
        Some(v) => v,
        None => {
            let v = Precision::from_env().unwrap_or(Precision::F32);
            p.set(Some(v));
            v
        }
    })
}

pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(Some(p)));
}

/// Runs `f` with `p` in effect on this thread, restoring the previous mode.
pub fn with_precision<R>(p: Precision, f: impl FnOnce() -> R) -> R {
    let prev = precision();
    set_precision(p);
    struct Restore(Precision);
    impl Drop for Restore {
        fn drop(&mut self) {
            set_precision(self.0);
        }
    }
    let _guard = Restore(prev);
    f()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("zero-sized axis in {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Shape and data are trusted to agree; used by kernels that size their own outputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }

    /// Applies the thread's precision rounding in place.
    pub fn rounded(mut self) -> Self {
        if precision() == Precision::F32 {
            for x in &mut self.data {
                *x = *x as f32 as f64;
            }
        }
        self
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Writes the `TNSR` dump: magic line, `rank d0 .. d{rank-1}` line, then
    /// little-endian `f32` values in row-major order.
    pub fn write_tnsr<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "TNSR")?;
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        writeln!(w, "{} {}", self.shape.len(), dims.join(" "))?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &x in &self.data {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_tnsr<R: BufRead>(r: &mut R) -> Result<Self> {
        let bad = |msg: String| Error::Parse {
            path: "<tnsr>".into(),
            line: 0,
            msg,
        };
        let mut magic = String::new();
        r.read_line(&mut magic)
            .map_err(|e| bad(format!("reading magic: {e}")))?;
        if magic.trim_end() != "TNSR" {
            return Err(bad(format!("bad magic {:?}", magic.trim_end())));
        }
        let mut header = String::new();
        r.read_line(&mut header)
            .map_err(|e| bad(format!("reading header: {e}")))?;
        let fields: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("bad header {:?}: {e}", header.trim_end())))?;
        let (&rank, dims) = fields
            .split_first()
            .ok_or_else(|| bad("empty header".into()))?;
        if dims.len() != rank {
            return Err(bad(format!("rank {rank} but {} dims", dims.len())));
        }
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| bad(format!("reading {n} values: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor::new(dims.to_vec(), data)
    }
}
