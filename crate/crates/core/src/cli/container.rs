//! Self-describing binary tensor files.
//!
//! A container is an 8-byte ASCII decimal length `L`, an `L`-byte JSON
//! header, a newline, and the little-endian payload. The header holds
//! `dtype` (`"f32"` or `"f64"`), `shape`, `order` (always `"C"`) and a free
//! `meta` object. An archive is several containers back to back, each
//! naming itself with `meta.name`.
//!
//! ```
//! use probreg::cli::container::{read_container, write_container, Container};
//!
//! let c = Container::f64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).with_name("a");
//! let mut buf = Vec::new();
//! write_container(&mut buf, &c).unwrap();
//! let back = read_container(&mut buf.as_slice()).unwrap().unwrap();
//! assert_eq!(back, c);
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid_field::{FieldKind, Grid, ScalarImage, Transform, VectorField};

const LENGTH_DIGITS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::F64(_) => Dtype::F64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub shape: Vec<usize>,
    pub meta: Map<String, Value>,
    pub payload: Payload,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
    order: String,
    #[serde(default)]
    meta: Map<String, Value>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Container {
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            shape,
            meta: Map::new(),
            payload: Payload::F64(data),
        }
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            shape,
            meta: Map::new(),
            payload: Payload::F32(data),
        }
    }

    pub fn with_name(self, name: &str) -> Self {
        self.with_meta("name", Value::from(name))
    }

    pub fn with_meta(mut self, key: &str, value: Value) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.meta.get("name").and_then(Value::as_str)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }

    pub fn data(&self) -> Vec<f64> {
        self.payload.to_f64()
    }

    fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.payload.len() {
            return Err(format_err(format!(
                "shape {:?} needs {n} values, payload has {}",
                self.shape,
                self.payload.len()
            )));
        }
        Ok(())
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::f64(t.shape().to_vec(), t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data())
    }

    pub fn from_image(img: &ScalarImage) -> Self {
        Self::f64(img.grid().dims().to_vec(), img.values().to_vec())
            .with_meta("kind", Value::from("image"))
            .with_meta("spacing", Value::from(img.grid().spacing().to_vec()))
    }

    /// Vector fields are stored as `[dims..., D]`, which is their in-memory
    /// interleaved layout.
    pub fn from_field(field: &VectorField) -> Self {
        let mut shape = field.grid().dims().to_vec();
        shape.push(field.grid().ndim());
        Self::f64(shape, field.vectors().to_vec())
            .with_meta("kind", Value::from(field.kind().as_str()))
            .with_meta("spacing", Value::from(field.grid().spacing().to_vec()))
    }

    fn grid_for(&self, dims: &[usize]) -> Result<Grid> {
        match self.meta.get("spacing") {
            Some(Value::Array(s)) => {
                let spacing = s
                    .iter()
                    .map(|v| v.as_f64().ok_or_else(|| format_err("spacing must be numeric")))
                    .collect::<Result<Vec<f64>>>()?;
                Grid::new(dims.to_vec(), spacing)
            }
            Some(_) => Err(format_err("spacing must be an array")),
            None => Grid::unit(dims),
        }
    }

    pub fn to_image(&self) -> Result<ScalarImage> {
        let grid = self.grid_for(&self.shape)?;
        ScalarImage::new(grid, self.data())
    }

    pub fn to_field(&self, default_kind: FieldKind) -> Result<VectorField> {
        let (dims, d) = self.shape.split_at(self.shape.len().saturating_sub(1));
        if d.first() != Some(&dims.len()) {
            return Err(format_err(format!("{:?} is not a vector field shape", self.shape)));
        }
        let kind = match self.meta_str("kind") {
            Some("velocity") => FieldKind::Velocity,
            Some("displacement") => FieldKind::Displacement,
            _ => default_kind,
        };
        VectorField::new(self.grid_for(dims)?, self.data(), kind)
    }

    pub fn to_transform(&self) -> Result<Transform> {
        Ok(Transform::from_displacement(
            self.to_field(FieldKind::Displacement)?
                .with_kind(FieldKind::Displacement),
        ))
    }
}

pub fn write_container<W: Write>(w: &mut W, c: &Container) -> Result<()> {
    c.validate()?;
    let header = Header {
        dtype: c.payload.dtype(),
        shape: c.shape.clone(),
        order: "C".into(),
        meta: c.meta.clone(),
    };
    let json = serde_json::to_string(&header)?;
    if json.len() >= 10usize.pow(LENGTH_DIGITS as u32) {
        return Err(format_err("header too long"));
    }
    write!(w, "{:0width$}", json.len(), width = LENGTH_DIGITS)?;
    w.write_all(json.as_bytes())?;
    w.write_all(b"\n")?;
    match &c.payload {
        Payload::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        Payload::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
    }
    Ok(())
}

/// Reads one container; `None` at a clean end of input.
pub fn read_container<R: Read>(r: &mut R) -> Result<Option<Container>> {
    let mut len_buf = [0u8; LENGTH_DIGITS];
    let mut got = 0;
    while got < LENGTH_DIGITS {
        let n = r.read(&mut len_buf[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(format_err("truncated length prefix"));
        }
        got += n;
    }
    let len: usize = std::str::from_utf8(&len_buf)
        .ok()
        .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err("length prefix is not an 8-digit decimal"))?;
    let mut header = vec![0u8; len + 1];
    r.read_exact(&mut header)?;
    if header.pop() != Some(b'\n') {
        return Err(format_err("header is not followed by a newline"));
    }
    let header: Header = serde_json::from_slice(&header)?;
    if header.order != "C" {
        return Err(format_err(format!("unsupported order {:?}", header.order)));
    }
    let n: usize = header.shape.iter().product();
    let mut bytes = vec![0u8; n * header.dtype.size()];
    r.read_exact(&mut bytes)?;
    let payload = match header.dtype {
        Dtype::F32 => Payload::F32(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64 => Payload::F64(
            bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(Some(Container {
        shape: header.shape,
        meta: header.meta,
        payload,
    }))
}

pub fn save(path: &Path, containers: &[Container]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in containers {
        write_container(&mut w, c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Container>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(c) = read_container(&mut r)? {
        out.push(c);
    }
    Ok(out)
}

/// Loads a file holding exactly one container.
pub fn load_one(path: &Path) -> Result<Container> {
    let mut all = load(path)?;
    if all.len() != 1 {
        return Err(format_err(format!(
            "{} holds {} containers, expected one",
            path.display(),
            all.len()
        )));
    }
    Ok(all.remove(0))
}

pub fn find<'a>(archive: &'a [Container], name: &str) -> Option<&'a Container> {
    archive.iter().find(|c| c.name() == Some(name))
}
