//! On-disk dataset layout:
//!
//! ```text
//! manifest.json          schema, class names, grid, per-frame camera and metadata
//! frames/<id>.img        "UBIM" u32 version, u32 channels, u32 height, u32 width, f32 pixels [c][y][x]
//! frames/<id>.rad        "UBRD" u32 version, u32 points, u32 extras, per point f32 x y z then f32 extras
//! frames/<id>.gt         "UBGT" u32 version, u32 boxes, per box u32 class, f64 cx cy cz l w h yaw score
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::image::Image;
use super::scene::{generate_frames, Frame, FrameMeta, SceneConfig};
use crate::detection::Box3D;
use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, CameraModel};
use crate::radar::{RadarPointCloud, RadarSchema};

pub const FORMAT_VERSION: u32 = 1;
const IMG_MAGIC: &[u8; 4] = b"UBIM";
const RAD_MAGIC: &[u8; 4] = b"UBRD";
const GT_MAGIC: &[u8; 4] = b"UBGT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: String,
    pub camera: CameraModel,
    pub meta: FrameMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub schema: RadarSchema,
    pub class_names: Vec<String>,
    pub grid: BevGridSpec,
    /// Generator settings when the data is synthetic.
    pub scene: Option<SceneConfig>,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn generate(cfg: &SceneConfig, count: usize) -> Result<Self> {
        let frames = generate_frames(cfg, count)?;
        Ok(Self::from_frames(cfg.schema.clone(), cfg.class_names(), cfg.grid.clone(), Some(cfg.clone()), frames))
    }

    pub fn from_frames(schema: RadarSchema, class_names: Vec<String>, grid: BevGridSpec, scene: Option<SceneConfig>, frames: Vec<Frame>) -> Self {
        let entries = frames.iter().map(|f| FrameEntry { id: f.id.clone(), camera: f.camera.clone(), meta: f.meta.clone() }).collect();
        Self { manifest: Manifest { format_version: FORMAT_VERSION, schema, class_names, grid, scene, frames: entries }, frames }
    }
}

/// Uniform access to frames so real-dataset readers can replace the synthetic
/// one without touching training or evaluation.
pub trait FrameSource: Sync {
    fn len(&self) -> usize;
    fn schema(&self) -> &RadarSchema;
    fn class_names(&self) -> &[String];
    fn load(&self, index: usize) -> Result<Frame>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn load_all(&self) -> Result<Vec<Frame>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

impl FrameSource for Dataset {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn schema(&self) -> &RadarSchema {
        &self.manifest.schema
    }

    fn class_names(&self) -> &[String] {
        &self.manifest.class_names
    }

    fn load(&self, index: usize) -> Result<Frame> {
        self.frames.get(index).cloned().ok_or_else(|| Error::InvalidInput(format!("frame index {index} out of range")))
    }
}

/// Lazily reads frames from a dataset directory.
#[derive(Clone, Debug)]
pub struct DiskDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl DiskDataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = read_manifest(&root)?;
        Ok(Self { root, manifest })
    }
}

impl FrameSource for DiskDataset {
    fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    fn schema(&self) -> &RadarSchema {
        &self.manifest.schema
    }

    fn class_names(&self) -> &[String] {
        &self.manifest.class_names
    }

    fn load(&self, index: usize) -> Result<Frame> {
        let e = self.manifest.frames.get(index).ok_or_else(|| Error::InvalidInput(format!("frame index {index} out of range")))?;
        read_frame(&self.root, e, &self.manifest)
    }
}

fn frame_path(root: &Path, id: &str, ext: &str) -> PathBuf {
    root.join("frames").join(format!("{id}.{ext}"))
}

fn header(magic: &[u8; 4], fields: &[u32]) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for f in fields {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

fn count_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidInput(format!("{what} count {n} does not fit the record format")))
}

pub fn encode_image(img: &Image) -> Result<Vec<u8>> {
    let mut out = header(IMG_MAGIC, &[3, count_u32(img.height, "row")?, count_u32(img.width, "column")?]);
    out.reserve(img.data.len() * 4);
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_radar(cloud: &RadarPointCloud) -> Result<Vec<u8>> {
    let n = cloud.schema.num_extras();
    let mut out = header(RAD_MAGIC, &[count_u32(cloud.len(), "point")?, count_u32(n, "channel")?]);
    for i in 0..cloud.len() {
        for v in cloud.xyz[i].iter().chain(cloud.extras_row(i)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn encode_boxes(boxes: &[Box3D]) -> Result<Vec<u8>> {
    let mut out = header(GT_MAGIC, &[count_u32(boxes.len(), "box")?]);
    for b in boxes {
        out.extend_from_slice(&count_u32(b.class_id, "class")?.to_le_bytes());
        for v in b.center.iter().chain(&b.dims).chain([&b.yaw, &b.score]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Little-endian reader that reports failures against a frame and field.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    frame: &'a str,
    field: &'static str,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse { frame: self.frame.into(), field: self.field.into(), detail: detail.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.err(format!("truncated record: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len())));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(self.err("bad magic bytes"));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(self.err(format!("unsupported format version {v}")));
        }
        Ok(())
    }

    /// Ensure `count` records of `size` bytes remain, before allocating.
    fn expect_records(&self, count: usize, size: usize) -> Result<()> {
        let need = count.checked_mul(size).ok_or_else(|| self.err("record count overflows"))?;
        let have = self.bytes.len() - self.pos;
        if have < need {
            return Err(self.err(format!("truncated record: {count} entries need {need} bytes, {have} remain")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_image(bytes: &[u8], frame: &str) -> Result<Image> {
    let mut r = Reader { bytes, pos: 0, frame, field: "image" };
    r.header(IMG_MAGIC)?;
    let c = r.u32()? as usize;
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    if c != Image::CHANNELS {
        return Err(r.err(format!("expected 3 channels, found {c}")));
    }
    let n = c.checked_mul(h).and_then(|v| v.checked_mul(w)).ok_or_else(|| r.err("image size overflows"))?;
    r.expect_records(n, 4)?;
    let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(Image { height: h, width: w, data })
}

pub fn decode_radar(bytes: &[u8], frame: &str, schema: &RadarSchema) -> Result<RadarPointCloud> {
    let mut r = Reader { bytes, pos: 0, frame, field: "radar" };
    r.header(RAD_MAGIC)?;
    let n = r.u32()? as usize;
    let e = r.u32()? as usize;
    if e != schema.num_extras() {
        return Err(r.err(format!("{e} extra channels, schema `{}` has {}", schema.name, schema.num_extras())));
    }
    r.expect_records(n, 4 * (3 + e))?;
    let mut xyz = Vec::with_capacity(n);
    let mut extras = Vec::with_capacity(n * e);
    for _ in 0..n {
        xyz.push([r.f32()?, r.f32()?, r.f32()?]);
        for _ in 0..e {
            extras.push(r.f32()?);
        }
    }
    r.finish()?;
    RadarPointCloud::new(xyz, extras, schema.clone()).map_err(|err| r.err(err.to_string()))
}

pub fn decode_boxes(bytes: &[u8], frame: &str) -> Result<Vec<Box3D>> {
    let mut r = Reader { bytes, pos: 0, frame, field: "gt" };
    r.header(GT_MAGIC)?;
    let n = r.u32()? as usize;
    r.expect_records(n, 4 + 8 * 8)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = r.u32()? as usize;
        let mut v = [0.0; 8];
        for x in v.iter_mut() {
            *x = r.f64()?;
        }
        // Fields are restored verbatim, without re-wrapping the yaw.
        out.push(Box3D { center: [v[0], v[1], v[2]], dims: [v[3], v[4], v[5]], yaw: v[6], class_id, score: v[7] });
    }
    r.finish()?;
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if ds.manifest.frames.len() != ds.frames.len() {
        return Err(Error::InvalidInput("manifest and frame list differ in length".into()));
    }
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for f in &ds.frames {
        if f.id.is_empty() || f.id.contains(['/', '\\']) || f.id.starts_with('.') {
            return Err(Error::InvalidInput(format!("frame id `{}` is not a valid file name", f.id)));
        }
        write_file(&frame_path(dir, &f.id, "img"), &encode_image(&f.image)?)?;
        write_file(&frame_path(dir, &f.id, "rad"), &encode_radar(&f.radar)?)?;
        write_file(&frame_path(dir, &f.id, "gt"), &encode_boxes(&f.gt)?)?;
    }
    let json = serde_json::to_vec_pretty(&ds.manifest)?;
    write_file(&dir.join("manifest.json"), &json)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = read_file(&dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_slice(&bytes)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!("dataset format version {} (expected {FORMAT_VERSION})", m.format_version)));
    }
    m.schema.validate()?;
    Ok(m)
}

fn read_frame(dir: &Path, e: &FrameEntry, m: &Manifest) -> Result<Frame> {
    let image = decode_image(&read_file(&frame_path(dir, &e.id, "img"))?, &e.id)?;
    let radar = decode_radar(&read_file(&frame_path(dir, &e.id, "rad"))?, &e.id, &m.schema)?;
    let gt = decode_boxes(&read_file(&frame_path(dir, &e.id, "gt"))?, &e.id)?;
    if let Some(b) = gt.iter().find(|b| b.class_id >= m.class_names.len()) {
        return Err(Error::Parse { frame: e.id.clone(), field: "gt".into(), detail: format!("class id {} out of range", b.class_id) });
    }
    Ok(Frame { id: e.id.clone(), image, radar, gt, camera: e.camera.clone(), meta: e.meta.clone() })
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let frames = manifest.frames.iter().map(|e| read_frame(dir, e, &manifest)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, frames })
}

/// SHA-256 over the manifest and every frame file, in manifest order.
pub fn dataset_checksum(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let mut h = Sha256::new();
    h.update(read_file(&dir.join("manifest.json"))?);
    for e in read_manifest(dir)?.frames {
        for ext in ["img", "rad", "gt"] {
            h.update(read_file(&frame_path(dir, &e.id, ext))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}
