//! Self-describing binary raster container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "LSAF"
//!      4     4  u32 version (1)
//!      8     4  u32 bands
//!     12     4  u32 height
//!     16     4  u32 width
//!     20     1  u8 dtype tag
//!     21     …  payload, little-endian, band-sequential
//! ```
//!
//! The same header fronts checkpoint files, which use the tensor-table dtype
//! tag (see `model::checkpoint`).

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"LSAF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    U16 = 2,
    F64 = 3,
    /// Named tensor table used by checkpoints.
    TensorTable = 0x10,
}

impl DType {
    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DType::F32),
            2 => Ok(DType::U16),
            3 => Ok(DType::F64),
            0x10 => Ok(DType::TensorTable),
            _ => Err(Error::Format(format!("unknown dtype tag {tag:#04x}"))),
        }
    }

    /// Bytes per element; `None` for variable-length payloads.
    pub fn width(self) -> Option<usize> {
        match self {
            DType::F32 => Some(4),
            DType::U16 => Some(2),
            DType::F64 => Some(8),
            DType::TensorTable => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RasterHeader {
    pub bands: u32,
    pub height: u32,
    pub width: u32,
    pub dtype: DType,
}

impl RasterHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&VERSION.to_le_bytes());
        out[8..12].copy_from_slice(&self.bands.to_le_bytes());
        out[12..16].copy_from_slice(&self.height.to_le_bytes());
        out[16..20].copy_from_slice(&self.width.to_le_bytes());
        out[20] = self.dtype as u8;
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "file holds {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:02x?}", &bytes[0..4])));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(RasterHeader {
            bands: word(8),
            height: word(12),
            width: word(16),
            dtype: DType::from_tag(bytes[20])?,
        })
    }

    pub fn elements(&self) -> Option<usize> {
        (self.bands as usize)
            .checked_mul(self.height as usize)?
            .checked_mul(self.width as usize)
    }

    /// Payload bytes the header demands, for fixed-width dtypes.
    pub fn payload_len(&self) -> Result<usize> {
        let width = self
            .dtype
            .width()
            .ok_or_else(|| Error::Format("tensor table is not a raster payload".into()))?;
        self.elements()
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Format("header dimensions overflow".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RasterData {
    F32(Vec<f32>),
    U16(Vec<u16>),
    F64(Vec<f64>),
}

/// A decoded raster file: header plus typed payload.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterFile {
    pub header: RasterHeader,
    pub data: RasterData,
}

impl RasterFile {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = RasterHeader::decode(bytes)?;
        let expected = header.payload_len()?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "header declares {}x{}x{} {:?} ({expected} payload bytes) but file carries {}",
                header.bands,
                header.height,
                header.width,
                header.dtype,
                payload.len()
            )));
        }
        let data = match header.dtype {
            DType::F32 => RasterData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U16 => RasterData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => RasterData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::TensorTable => unreachable!("payload_len rejects tensor tables"),
        };
        Ok(RasterFile { header, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.header.encode().to_vec();
        match &self.data {
            RasterData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RasterData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RasterData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Reads a raster, checking the file length against the header before
    /// loading the payload.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = File::open(path)?;
        let file_len = file.metadata()?.len();
        let mut head = [0u8; HEADER_LEN];
        let got = read_up_to(&mut file, &mut head)?;
        let header = RasterHeader::decode(&head[..got])?;
        let expected = header.payload_len()? as u64;
        if file_len != HEADER_LEN as u64 + expected {
            return Err(Error::Format(format!(
                "{}: header demands {expected} payload bytes, file has {}",
                path.display(),
                file_len.saturating_sub(HEADER_LEN as u64)
            )));
        }
        let mut bytes = head.to_vec();
        bytes.reserve(expected as usize);
        file.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        File::create(path)?.write_all(&self.encode())?;
        Ok(())
    }

    pub fn from_tensor(t: &Tensor, dtype: DType) -> Result<Self> {
        let &[bands, height, width] = t.shape() else {
            return Err(Error::dim("raster", t.shape(), &[0, 0, 0]));
        };
        let data = match dtype {
            DType::F32 => RasterData::F32(t.data().iter().map(|&v| v as f32).collect()),
            DType::F64 => RasterData::F64(t.data().iter().map(|&v| v as f64).collect()),
            _ => return Err(Error::Format(format!("{dtype:?} cannot hold real-valued bands"))),
        };
        Ok(RasterFile {
            header: header(bands, height, width, dtype)?,
            data,
        })
    }

    pub fn from_labels(labels: &LabelMap) -> Result<Self> {
        Ok(RasterFile {
            header: header(1, labels.height, labels.width, DType::U16)?,
            data: RasterData::U16(labels.data.clone()),
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let data: Vec<Scalar> = match &self.data {
            RasterData::F32(v) => v.iter().map(|&x| x as Scalar).collect(),
            RasterData::F64(v) => v.iter().map(|&x| x as Scalar).collect(),
            RasterData::U16(_) => return Err(Error::Format("expected a real-valued raster, found u16 labels".into())),
        };
        let h = &self.header;
        Tensor::new(vec![h.bands as usize, h.height as usize, h.width as usize], data)
            .map_err(|_| Error::Format("raster has a zero dimension".into()))
    }

    pub fn to_labels(&self) -> Result<LabelMap> {
        let RasterData::U16(v) = &self.data else {
            return Err(Error::Format("label raster must use the u16 dtype".into()));
        };
        if self.header.bands != 1 {
            return Err(Error::Format(format!("label raster has {} bands, expected 1", self.header.bands)));
        }
        LabelMap::new(self.header.height as usize, self.header.width as usize, v.clone())
    }
}

fn header(bands: usize, height: usize, width: usize, dtype: DType) -> Result<RasterHeader> {
    let narrow = |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")));
    Ok(RasterHeader {
        bands: narrow(bands)?,
        height: narrow(height)?,
        width: narrow(width)?,
        dtype,
    })
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..])? {
            0 => break,
            n => got += n,
        }
    }
    Ok(got)
}

/// Per-pixel class labels; 0 marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if height * width != data.len() || height == 0 || width == 0 {
            return Err(Error::dim("label map", &[height, width], &[data.len()]));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.data[row * self.width + col]
    }

    pub fn max_label(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&l| l != 0).count()
    }
}

/// Co-registered HSI cube, LiDAR elevation and label map of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterPair {
    /// `bands × H × W`.
    pub hsi: Tensor,
    /// `1 × H × W`, meters.
    pub lidar: Tensor,
    pub labels: LabelMap,
    /// Number of classes K; labels lie in `0..=K`.
    pub classes: usize,
}

impl RasterPair {
    /// Validates registration. `classes` defaults to the largest label present.
    pub fn new(hsi: Tensor, lidar: Tensor, labels: LabelMap, classes: Option<usize>) -> Result<Self> {
        let &[_, h, w] = hsi.shape() else {
            return Err(Error::dim("hsi raster", hsi.shape(), &[0, 0, 0]));
        };
        let &[lb, lh, lw] = lidar.shape() else {
            return Err(Error::dim("lidar raster", lidar.shape(), &[1, h, w]));
        };
        if lb != 1 {
            return Err(Error::Format(format!("lidar raster must have one band, found {lb}")));
        }
        if (lh, lw) != (h, w) {
            return Err(Error::Registration {
                what: "lidar raster",
                expected_h: h,
                expected_w: w,
                found_h: lh,
                found_w: lw,
            });
        }
        if (labels.height, labels.width) != (h, w) {
            return Err(Error::Registration {
                what: "label map",
                expected_h: h,
                expected_w: w,
                found_h: labels.height,
                found_w: labels.width,
            });
        }
        let max = labels.max_label() as usize;
        let classes = classes.unwrap_or(max);
        if max > classes {
            return Err(Error::Format(format!("label {max} exceeds class count {classes}")));
        }
        Ok(RasterPair {
            hsi,
            lidar,
            labels,
            classes,
        })
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    pub fn bands(&self) -> usize {
        self.hsi.shape()[0]
    }

    pub fn load(hsi: impl AsRef<Path>, lidar: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let hsi = RasterFile::read(hsi)?.to_tensor()?;
        let lidar = RasterFile::read(lidar)?.to_tensor()?;
        let labels = RasterFile::read(labels)?.to_labels()?;
        RasterPair::new(hsi, lidar, labels, None)
    }

    /// Writes the three rasters; real-valued bands are stored as f32.
    pub fn save(&self, hsi: impl AsRef<Path>, lidar: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
        RasterFile::from_tensor(&self.hsi, DType::F32)?.write(hsi)?;
        RasterFile::from_tensor(&self.lidar, DType::F32)?.write(lidar)?;
        RasterFile::from_labels(&self.labels)?.write(labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_raster_roundtrip() {
        let t = Tensor::zeros(&[3, 2, 2]);
        let file = RasterFile::from_tensor(&t, DType::F32).unwrap();
        let bytes = file.encode();
        assert_eq!(bytes.len(), HEADER_LEN + 3 * 2 * 2 * 4);
        let back = RasterFile::decode(&bytes).unwrap();
        assert_eq!(back.to_tensor().unwrap(), t);
    }

    #[test]
    fn short_file_is_format_error() {
        let bytes = RasterFile::from_tensor(&Tensor::ones(&[3, 2, 2]), DType::F32)
            .unwrap()
            .encode();
        let err = RasterFile::decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert!(matches!(RasterFile::decode(&bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn houston_header_without_payload() {
        let header = RasterHeader {
            bands: 144,
            height: 349,
            width: 1905,
            dtype: DType::F32,
        };
        let bytes = header.encode();
        assert_eq!(RasterHeader::decode(&bytes).unwrap(), header);
        assert_eq!(header.payload_len().unwrap(), 144 * 349 * 1905 * 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("houston.lsaf");
        std::fs::write(&path, bytes).unwrap();
        let err = RasterFile::read(&path).unwrap_err().to_string();
        assert!(err.contains(&(144 * 349 * 1905 * 4).to_string()), "{err}");
    }

    #[test]
    fn overflowing_header_rejected() {
        let header = RasterHeader {
            bands: u32::MAX,
            height: u32::MAX,
            width: u32::MAX,
            dtype: DType::F64,
        };
        assert!(RasterFile::decode(&header.encode()).is_err());
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = RasterFile::from_labels(&LabelMap::new(1, 1, vec![3]).unwrap())
            .unwrap()
            .encode();
        bytes[4] = 2;
        assert!(RasterFile::decode(&bytes).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(RasterFile::decode(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn registration_mismatch() {
        let hsi = Tensor::zeros(&[2, 3, 3]);
        let lidar = Tensor::zeros(&[1, 3, 4]);
        let labels = LabelMap::new(3, 3, vec![0; 9]).unwrap();
        assert!(matches!(
            RasterPair::new(hsi, lidar, labels, None),
            Err(Error::Registration { .. })
        ));
    }

    #[test]
    fn labels_above_class_count_rejected() {
        let labels = LabelMap::new(1, 2, vec![1, 5]).unwrap();
        let r = RasterPair::new(Tensor::zeros(&[1, 1, 2]), Tensor::zeros(&[1, 1, 2]), labels, Some(3));
        assert!(r.is_err());
    }
}
