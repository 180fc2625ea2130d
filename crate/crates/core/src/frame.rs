//! Frame containers and the on-disk array format.
//!
//! Every 2-D array (raw frames, calibration maps, weight tensors, sample
//! pools) is stored in one container layout:
//!
//! | bytes  | content                                    |
//! |--------|--------------------------------------------|
//! | 0..4   | magic `PNNF`                               |
//! | 4      | version, `1`                               |
//! | 5      | dtype code: `1` = f32 LE, `2` = f64 LE     |
//! | 6..8   | reserved, zero                             |
//! | 8..16  | height, u64 LE                             |
//! | 16..24 | width, u64 LE                              |
//! | 24..32 | reserved, zero                             |
//! | 32..   | `height * width` values, row-major         |
//!
//! Frame metadata travels in a TOML sidecar next to the container.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PNNF";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

pub type Iso = u32;

/// Payload of a container.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }
}

pub fn encode_container(height: usize, width: usize, payload: &Payload) -> Result<Vec<u8>> {
    if height * width != payload.len() {
        return Err(Error::Length {
            expected: height * width,
            found: payload.len(),
        });
    }
    let (code, elem) = match payload {
        Payload::F32(_) => (DTYPE_F32, 4),
        Payload::F64(_) => (DTYPE_F64, 8),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() * elem);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(code);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(height as u64).to_le_bytes());
    out.extend_from_slice(&(width as u64).to_le_bytes());
    out.extend_from_slice(&[0u8; 8]);
    match payload {
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<(usize, usize, Payload)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "container shorter than its {HEADER_LEN}-byte header"
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[6..8] != [0, 0] || bytes[24..32] != [0u8; 8] {
        return Err(Error::Format("reserved header bytes are not zero".into()));
    }
    let height = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let width = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = height
        .checked_mul(width)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    let body = &bytes[HEADER_LEN..];
    let elem = match bytes[5] {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    if body.len() % elem != 0 || body.len() / elem != count {
        return Err(Error::Length {
            expected: count,
            found: body.len() / elem,
        });
    }
    let payload = if elem == 4 {
        Payload::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        Payload::F64(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    };
    Ok((height as usize, width as usize, payload))
}

pub fn write_container(path: &Path, height: usize, width: usize, payload: &Payload) -> Result<()> {
    let bytes = encode_container(height, width, payload)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<(usize, usize, Payload)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

/// A real-valued 2-D field in DN, row-major. Used for residuals, maps and
/// synthesized noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Length {
                expected: height * width,
                found: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.width..(r + 1) * self.width]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, self.height, self.width, &Payload::F64(self.data.clone()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, w, payload) = read_container(path)?;
        Self::new(h, w, payload.to_f64())
    }
}

/// One sensor readout with its acquisition metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    pub height: usize,
    pub width: usize,
    pub iso: Iso,
    pub black_level: f64,
    pub white_level: f64,
    pub bit_depth: u8,
    /// Quantized frames hold integer values in `[0, 2^bit_depth - 1]`.
    pub quantized: bool,
    pub data: Vec<f32>,
}

impl RawFrame {
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn max_code(&self) -> f64 {
        ((1u64 << self.bit_depth) - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.height * self.width != self.data.len() {
            return Err(Error::Length {
                expected: self.height * self.width,
                found: self.data.len(),
            });
        }
        if self.black_level >= self.white_level {
            return Err(Error::Invariant(format!(
                "black level {} not below white level {}",
                self.black_level, self.white_level
            )));
        }
        if self.bit_depth == 0 || self.bit_depth > 24 {
            return Err(Error::Invariant(format!(
                "bit depth {} outside 1..=24",
                self.bit_depth
            )));
        }
        if self.quantized {
            let max = self.max_code();
            if let Some((i, v)) = self
                .data
                .iter()
                .enumerate()
                .find(|(_, &v)| !(0.0..=max as f32).contains(&v) || v.fract() != 0.0)
            {
                return Err(Error::Invariant(format!(
                    "quantized value {v} at index {i} outside integer range [0, {max}]"
                )));
            }
        } else if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("frame data".into()));
        }
        Ok(())
    }

    pub fn to_plane(&self) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn meta(&self) -> FrameMeta {
        FrameMeta {
            container: String::new(),
            iso: self.iso,
            black_level: self.black_level,
            white_level: self.white_level,
            bit_depth: self.bit_depth,
            quantized: self.quantized,
        }
    }
}

/// Sidecar record stored next to a frame container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    /// File name of the container, relative to the sidecar's directory.
    pub container: String,
    pub iso: Iso,
    pub black_level: f64,
    pub white_level: f64,
    pub bit_depth: u8,
    pub quantized: bool,
}

pub fn sidecar_path(container: &Path) -> PathBuf {
    let mut name = container.as_os_str().to_owned();
    name.push(".toml");
    PathBuf::from(name)
}

pub fn write_frame(frame: &RawFrame, path: &Path) -> Result<()> {
    frame.validate()?;
    write_container(path, frame.height, frame.width, &Payload::F32(frame.data.clone()))?;
    let mut meta = frame.meta();
    meta.container = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    write_toml(&sidecar_path(path), &meta)
}

pub fn read_frame(path: &Path) -> Result<RawFrame> {
    let (height, width, payload) = read_container(path)?;
    let meta: FrameMeta = read_toml(&sidecar_path(path))?;
    let data = match payload {
        Payload::F32(v) => v,
        Payload::F64(_) => return Err(Error::Format("frames must be stored as f32".into())),
    };
    let frame = RawFrame {
        height,
        width,
        iso: meta.iso,
        black_level: meta.black_level,
        white_level: meta.white_level,
        bit_depth: meta.bit_depth,
        quantized: meta.quantized,
        data,
    };
    frame.validate()?;
    Ok(frame)
}

/// Frames of one ISO sharing shape and black level.
#[derive(Debug, Clone)]
pub struct FrameSet {
    iso: Iso,
    frames: Vec<RawFrame>,
}

impl FrameSet {
    pub fn new(frames: Vec<RawFrame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty frame set".into()))?;
        for f in &frames {
            if f.shape() != first.shape() {
                return Err(Error::Shape {
                    expected: first.shape(),
                    found: f.shape(),
                });
            }
            if f.iso != first.iso || f.black_level != first.black_level {
                return Err(Error::Invariant(
                    "frame set members differ in iso or black level".into(),
                ));
            }
        }
        Ok(Self {
            iso: first.iso,
            frames,
        })
    }

    pub fn iso(&self) -> Iso {
        self.iso
    }

    pub fn frames(&self) -> &[RawFrame] {
        &self.frames
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frames[0].shape()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// One group of frames sharing an ISO (a dark set or one flat exposure level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGroup {
    pub iso: Iso,
    /// Container paths, relative to the manifest's directory unless absolute.
    pub frames: Vec<PathBuf>,
}

/// TOML list of frame groups.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub groups: Vec<FrameGroup>,
}

impl FrameManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_toml(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_toml(path)
    }

    /// Reads every group into a [`FrameSet`], checking each frame's ISO.
    pub fn read_sets(&self, manifest_path: &Path) -> Result<Vec<FrameSet>> {
        let base = manifest_path.parent().unwrap_or(Path::new(""));
        self.groups
            .iter()
            .map(|g| {
                let frames = g
                    .frames
                    .iter()
                    .map(|p| {
                        let f = read_frame(&base.join(p))?;
                        if f.iso != g.iso {
                            return Err(Error::Invariant(format!(
                                "{} has iso {}, manifest says {}",
                                p.display(),
                                f.iso,
                                g.iso
                            )));
                        }
                        Ok(f)
                    })
                    .collect::<Result<Vec<_>>>()?;
                FrameSet::new(frames)
            })
            .collect()
    }
}

/// Merges sets of equal ISO, in ascending ISO order.
pub fn group_by_iso(sets: Vec<FrameSet>) -> Result<Vec<FrameSet>> {
    let mut by_iso: std::collections::BTreeMap<Iso, Vec<RawFrame>> = Default::default();
    for s in sets {
        by_iso.entry(s.iso).or_default().extend(s.frames);
    }
    by_iso.into_values().map(FrameSet::new).collect()
}

pub(crate) fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::parse(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(h: usize, w: usize, data: Vec<f32>) -> RawFrame {
        RawFrame {
            height: h,
            width: w,
            iso: 800,
            black_level: 64.0,
            white_level: 4095.0,
            bit_depth: 12,
            quantized: true,
            data,
        }
    }

    #[test]
    fn round_trip_4x4() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pnnf");
        let f = frame(4, 4, (0..16).map(|v| v as f32 * 3.0).collect());
        write_frame(&f, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 16 * 4);
        let back = read_frame(&path).unwrap();
        assert_eq!(back, f);
        write_frame(&back, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn single_zero_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.pnnf");
        write_frame(&frame(1, 1, vec![0.0]), &path).unwrap();
        assert_eq!(read_frame(&path).unwrap().data, vec![0.0]);
    }

    #[test]
    fn same_content_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.pnnf"), dir.path().join("b.pnnf"));
        let f = frame(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        write_frame(&f, &a).unwrap();
        write_frame(&f, &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn short_payload_is_length_error() {
        let mut bytes = encode_container(4, 4, &Payload::F32(vec![0.0; 16])).unwrap();
        bytes.truncate(HEADER_LEN + 8 * 4);
        assert!(matches!(
            decode_container(&bytes),
            Err(Error::Length {
                expected: 16,
                found: 8
            })
        ));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode_container(1, 1, &Payload::F32(vec![0.0])).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_container(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_container(1, 1, &Payload::F32(vec![0.0])).unwrap();
        bytes[5] = 9;
        assert!(matches!(decode_container(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn quantized_range_bound() {
        assert!(frame(1, 1, vec![4095.0]).validate().is_ok());
        assert!(matches!(
            frame(1, 1, vec![4096.0]).validate(),
            Err(Error::Invariant(_))
        ));
        assert!(frame(1, 1, vec![10.5]).validate().is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.pnnf");
        write_frame(&frame(1, 1, vec![4095.0]), &path).unwrap();
        // Patch the payload to 4096 behind the writer's back.
        let mut bytes = fs::read(&path).unwrap();
        bytes[HEADER_LEN..].copy_from_slice(&4096f32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_frame(&path), Err(Error::Invariant(_))));
    }

    #[test]
    fn flipped_byte_changes_only_its_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flip.pnnf");
        let f = frame(3, 5, (0..15).map(|v| v as f32).collect());
        write_frame(&f, &path).unwrap();
        let (r, c) = (2usize, 1usize);
        // Pixel (r, c) starts at header + (r * width + c) * 4; byte 3 holds
        // the sign and high exponent bits.
        let offset = HEADER_LEN + (r * 5 + c) * 4 + 3;
        let mut bytes = fs::read(&path).unwrap();
        bytes[offset] ^= 0x80;
        fs::write(&path, &bytes).unwrap();
        let (_, _, payload) = read_container(&path).unwrap();
        let Payload::F32(v) = payload else { panic!() };
        for (i, (&a, &b)) in v.iter().zip(&f.data).enumerate() {
            if i == r * 5 + c {
                assert_eq!(a, -b);
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn frame_set_rejects_mixed_shapes() {
        let a = frame(2, 2, vec![0.0; 4]);
        let b = frame(1, 4, vec![0.0; 4]);
        assert!(matches!(FrameSet::new(vec![a.clone(), b]), Err(Error::Shape { .. })));
        assert!(FrameSet::new(vec![]).is_err());
        assert_eq!(FrameSet::new(vec![a.clone(), a]).unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn container_round_trip(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, "prop");
            let data: Vec<f32> = (0..h * w).map(|_| rng.random::<f32>() * 1e4 - 5e3).collect();
            let bytes = encode_container(h, w, &Payload::F32(data.clone())).unwrap();
            let (hh, ww, p) = decode_container(&bytes).unwrap();
            prop_assert_eq!((hh, ww), (h, w));
            let Payload::F32(back) = p else { panic!() };
            prop_assert!(back.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
            // Independent decoder working from the byte layout alone.
            for (i, v) in data.iter().enumerate() {
                let o = 32 + 4 * i;
                let raw = u32::from(bytes[o]) | u32::from(bytes[o + 1]) << 8
                    | u32::from(bytes[o + 2]) << 16 | u32::from(bytes[o + 3]) << 24;
                prop_assert_eq!(raw, v.to_bits());
            }
            prop_assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), h as u64);
        }
    }
}
