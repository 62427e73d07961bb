//! Binary files: trained weights (`HVWT`) and the decoded dataset cache
//! (`HVDS`). Both are little-endian with a magic tag and a version word.
//!
//! Weights: magic, `u32` version, `u32` length + spec JSON, `u32` tensor
//! count, then per tensor `u32` name length + name, `u32` rank, `u64` dims,
//! `f64` values.
//!
//! Dataset cache: magic, `u32` version, `u64` record count, `u32` H, W, C,
//! then per record `u8` label, `u32` id length + id, `f32` pixels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use pneumovit_core::data::LabeledImage;
use pneumovit_core::models::{Model, ModelSpec};
use pneumovit_core::{Real, Tensor};

use crate::error::{AppError, AppResult};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"HVWT";
pub const WEIGHTS_VERSION: u32 = 1;
pub const CACHE_MAGIC: [u8; 4] = *b"HVDS";
pub const CACHE_VERSION: u32 = 1;

struct Reader<R: Read> {
    inner: R,
    what: String,
}

impl<R: Read> Reader<R> {
    fn bad(&self, detail: impl std::fmt::Display) -> AppError {
        AppError::Data(format!("{}: {detail}", self.what))
    }

    fn bytes(&mut self, n: usize) -> AppResult<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.bad(format!("truncated file ({e})")))?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> AppResult<[u8; N]> {
        let mut buf = [0; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.bad(format!("truncated file ({e})")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> AppResult<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u32(&mut self) -> AppResult<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> AppResult<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> AppResult<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|_| self.bad("string is not UTF-8"))
    }

    fn header(&mut self, magic: [u8; 4], version: u32) -> AppResult<()> {
        let m: [u8; 4] = self.array()?;
        if m != magic {
            return Err(self.bad(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(&magic)
            )));
        }
        let v = self.u32()?;
        if v != version {
            return Err(self.bad(format!("unsupported version {v}, expected {version}")));
        }
        Ok(())
    }

    fn at_end(&mut self) -> bool {
        let mut probe = [0u8; 1];
        matches!(self.inner.read(&mut probe), Ok(0))
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn create(path: &Path) -> AppResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| AppError::io(path, e))?,
    ))
}

fn open(path: &Path) -> AppResult<Reader<BufReader<File>>> {
    let f = File::open(path).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    Ok(Reader {
        inner: BufReader::new(f),
        what: path.display().to_string(),
    })
}

/// Writes the spec and every parameter (trainable or not) of `model`.
pub fn save_weights(path: &Path, model: &Model) -> AppResult<()> {
    let spec = serde_json::to_string(&model.spec).map_err(|e| AppError::Runtime(e.to_string()))?;
    let mut w = create(path)?;
    let io = |e| AppError::io(path, e);
    w.write_all(&WEIGHTS_MAGIC).map_err(io)?;
    put_u32(&mut w, WEIGHTS_VERSION).map_err(io)?;
    put_str(&mut w, &spec).map_err(io)?;
    put_u32(&mut w, model.params.len() as u32).map_err(io)?;
    for (_, p) in model.params.iter() {
        put_str(&mut w, &p.name).map_err(io)?;
        put_u32(&mut w, p.value.rank() as u32).map_err(io)?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Named tensors and the spec stored in a weights file.
pub struct WeightsFile {
    pub spec: ModelSpec,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn read_weights(path: &Path) -> AppResult<WeightsFile> {
    let mut r = open(path)?;
    r.header(WEIGHTS_MAGIC, WEIGHTS_VERSION)?;
    let json = r.string()?;
    let spec: ModelSpec = serde_json::from_str(&json).map_err(|e| r.bad(format!("spec: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 8)?;
        let data: Vec<Real> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.bad(e))?;
        tensors.push((name, t));
    }
    if !r.at_end() {
        return Err(r.bad("trailing bytes after the last tensor"));
    }
    Ok(WeightsFile { spec, tensors })
}

/// Rebuilds the model a weights file describes. With `expected`, the stored
/// spec must match it exactly.
pub fn load_model(path: &Path, expected: Option<&ModelSpec>) -> AppResult<Model> {
    let file = read_weights(path)?;
    if let Some(spec) = expected {
        if spec != &file.spec {
            return Err(AppError::Data(format!(
                "{}: stored {} spec does not match the configured {} spec",
                path.display(),
                file.spec.kind,
                spec.kind
            )));
        }
    }
    let mut model = Model::build(&file.spec, 0)
        .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    model
        .load_parameters(file.tensors.iter().map(|(n, t)| (n.as_str(), t)))
        .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    Ok(model)
}

/// Writes decoded images with `f32` pixels.
pub fn save_cache(path: &Path, images: &[LabeledImage]) -> AppResult<()> {
    let [h, w, c] = images
        .first()
        .map(|im| im.hwc())
        .ok_or_else(|| AppError::Runtime("cannot cache an empty dataset".into()))?;
    let mut out = create(path)?;
    let io = |e| AppError::io(path, e);
    out.write_all(&CACHE_MAGIC).map_err(io)?;
    put_u32(&mut out, CACHE_VERSION).map_err(io)?;
    out.write_all(&(images.len() as u64).to_le_bytes())
        .map_err(io)?;
    for d in [h, w, c] {
        put_u32(&mut out, d as u32).map_err(io)?;
    }
    for im in images {
        if im.hwc() != [h, w, c] {
            return Err(AppError::Runtime(format!(
                "{} has shape {:?}, cache holds {:?}",
                im.source_id,
                im.hwc(),
                [h, w, c]
            )));
        }
        out.write_all(&[im.label]).map_err(io)?;
        put_str(&mut out, &im.source_id).map_err(io)?;
        for &v in im.pixels.data() {
            out.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn load_cache(path: &Path) -> AppResult<Vec<LabeledImage>> {
    let mut r = open(path)?;
    r.header(CACHE_MAGIC, CACHE_VERSION)?;
    let count = r.u64()? as usize;
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let label = r.u8()?;
        let id = r.string()?;
        let raw = r.bytes(h * w * c * 4)?;
        let data: Vec<Real> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as Real)
            .collect();
        let px = Tensor::new(&[h, w, c], data).map_err(|e| r.bad(e))?;
        out.push(LabeledImage::new(px, label, id).map_err(|e| r.bad(e))?);
    }
    if !r.at_end() {
        return Err(r.bad("trailing bytes after the last record"));
    }
    Ok(out)
}
