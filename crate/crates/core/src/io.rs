//! File formats: binary/ASCII PGM for 2D grayscale images and a two-file raw
//! array format (JSON sidecar plus little-endian payload) for everything else.
//!
//! Raw arrays with several channels are stored channel-last: the payload walks
//! voxels in row-major order and writes all channels of a voxel together.
//! For clouds, channel `a` is the coordinate along axis `a` of `shape`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, JacobianMap, LabelMap, Shape, VoxelCloud};
use crate::velocity::{ModelDescriptor, VelocityModel};

/// Decoded PGM raster. Samples are raw integer levels in `0..=maxval`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

struct Tokens<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.data.len() {
            match self.data[self.pos] {
                b'#' => {
                    while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn next(&mut self) -> Option<&'a [u8]> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.data[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self
            .next()
            .ok_or_else(|| Error::MalformedHeader(format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedHeader(format!("bad {what}")))
    }
}

pub fn parse_pgm(data: &[u8]) -> Result<Pgm> {
    let mut tokens = Tokens { data, pos: 0 };
    let binary = match tokens.next() {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(Error::MalformedHeader("expected P5 or P2 magic".into())),
    };
    let width = tokens.number("width")?;
    let height = tokens.number("height")?;
    let maxval = tokens.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader("zero extent".into()));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(Error::MalformedHeader(format!("maxval {maxval} out of range")));
    }
    let maxval = maxval as u16;
    let count = width
        .checked_mul(height)
        .ok_or_else(|| Error::MalformedHeader("extent overflow".into()))?;

    let samples = if binary {
        // exactly one whitespace byte separates the header from the raster
        match data.get(tokens.pos) {
            Some(c) if c.is_ascii_whitespace() => {}
            _ => return Err(Error::MalformedHeader("missing raster separator".into())),
        }
        let raster = &data[tokens.pos + 1..];
        let bps = if maxval < 256 { 1 } else { 2 };
        let expected = count
            .checked_mul(bps)
            .ok_or_else(|| Error::MalformedHeader("extent overflow".into()))?;
        if raster.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: raster.len(),
            });
        }
        let samples: Vec<u16> = if bps == 1 {
            raster[..expected].iter().map(|&b| b as u16).collect()
        } else {
            raster[..expected]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        };
        if samples.iter().any(|&s| s > maxval) {
            return Err(Error::MalformedPayload("sample exceeds maxval".into()));
        }
        samples
    } else {
        let mut samples = Vec::with_capacity(count.min(data.len()));
        for _ in 0..count {
            let tok = tokens.next().ok_or(Error::Truncated {
                expected: count,
                found: samples.len(),
            })?;
            let s = std::str::from_utf8(tok)
                .ok()
                .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
                .and_then(|s| s.parse::<u32>().ok())
                .filter(|&s| s <= maxval as u32)
                .ok_or_else(|| Error::MalformedPayload("bad ASCII sample".into()))?;
            samples.push(s as u16);
        }
        samples
    };
    Ok(Pgm {
        width,
        height,
        maxval,
        samples,
    })
}

pub fn encode_pgm(pgm: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval).into_bytes();
    if pgm.maxval < 256 {
        out.extend(pgm.samples.iter().map(|&s| s as u8));
    } else {
        out.extend(pgm.samples.iter().flat_map(|s| s.to_be_bytes()));
    }
    out
}

impl Pgm {
    /// Intensities mapped linearly to `[0, 1]`.
    pub fn to_image(&self) -> Result<Image> {
        let shape = Shape::new(&[self.height, self.width])?;
        let scale = 1.0 / self.maxval as f64;
        Image::new(
            shape,
            self.samples.iter().map(|&s| s as f64 * scale).collect(),
        )
    }

    /// Quantizes a 2D image, clamping intensities to `[0, 1]`.
    pub fn from_image(image: &Image, maxval: u16) -> Result<Self> {
        let [height, width] = image.shape().extents()[..] else {
            return Err(Error::mismatch("2D image", image.shape()));
        };
        if maxval == 0 {
            return Err(Error::Parameter("maxval must be positive".into()));
        }
        let samples = image
            .values()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * maxval as f64).round() as u16)
            .collect();
        Ok(Pgm {
            width,
            height,
            maxval,
            samples,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U16 => 2,
        }
    }
}

/// JSON sidecar of a raw array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub shape: Vec<usize>,
    pub channels: usize,
    pub dtype: DType,
    pub order: String,
    /// Any additional keys, e.g. the architecture descriptor of a parameter file.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ArrayHeader {
    pub fn new(shape: Vec<usize>, channels: usize, dtype: DType) -> Self {
        ArrayHeader {
            shape,
            channels,
            dtype,
            order: "row-major".into(),
            extra: Default::default(),
        }
    }

    /// Number of scalar elements, validated against overflow.
    pub fn element_count(&self) -> Result<usize> {
        if self.channels == 0 {
            return Err(Error::MalformedHeader("channels must be >= 1".into()));
        }
        self.shape
            .iter()
            .chain(std::iter::once(&self.channels))
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::MalformedHeader("element count overflow".into()))
    }

    pub fn byte_len(&self) -> Result<usize> {
        self.element_count()?
            .checked_mul(self.dtype.size())
            .ok_or_else(|| Error::MalformedHeader("byte length overflow".into()))
    }
}

pub fn parse_header(data: &[u8]) -> Result<ArrayHeader> {
    let header: ArrayHeader =
        serde_json::from_slice(data).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.order != "row-major" {
        return Err(Error::MalformedHeader(format!(
            "unsupported order {:?}",
            header.order
        )));
    }
    if header.shape.is_empty() {
        return Err(Error::MalformedHeader("empty shape".into()));
    }
    header.byte_len()?;
    Ok(header)
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U16(Vec<u16>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::U16(_) => DType::U16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating-point contents widened to `f64`.
    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match self {
            ArrayData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            ArrayData::F64(v) => Ok(v.clone()),
            ArrayData::U16(_) => Err(Error::DType {
                expected: "f32 or f64".into(),
                found: "u16".into(),
            }),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

pub fn decode_payload(header: &ArrayHeader, bytes: &[u8]) -> Result<ArrayData> {
    let expected = header.byte_len()?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::MalformedPayload(format!(
            "{} trailing bytes",
            bytes.len() - expected
        )));
    }
    Ok(match header.dtype {
        DType::F32 => ArrayData::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => ArrayData::F64(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U16 => ArrayData::U16(
            bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
    })
}

/// `(payload, sidecar)` paths for a raw array given either file or the stem.
pub fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("raw"), path.with_extension("json"))
}

pub fn read_array(path: &Path) -> Result<(ArrayHeader, ArrayData)> {
    let (payload, sidecar) = raw_paths(path);
    let header = parse_header(&fs::read(sidecar)?)?;
    let data = decode_payload(&header, &fs::read(payload)?)?;
    Ok((header, data))
}

pub fn write_array(path: &Path, header: &ArrayHeader, data: &ArrayData) -> Result<()> {
    if header.dtype != data.dtype() {
        return Err(Error::DType {
            expected: format!("{:?}", header.dtype),
            found: format!("{:?}", data.dtype()),
        });
    }
    if header.element_count()? != data.len() {
        return Err(Error::mismatch(header.element_count()?, data.len()));
    }
    let (payload, sidecar) = raw_paths(path);
    let json = serde_json::to_vec_pretty(header).map_err(std::io::Error::other)?;
    fs::write(sidecar, json)?;
    fs::write(payload, data.encode())?;
    Ok(())
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn expect_channels(header: &ArrayHeader, channels: usize) -> Result<()> {
    if header.channels != channels {
        return Err(Error::mismatch(
            format!("{channels} channel(s)"),
            format!("{} channel(s)", header.channels),
        ));
    }
    Ok(())
}

/// Reads a `.pgm` file or a single-channel float raw array.
pub fn read_image(path: &Path) -> Result<Image> {
    if is_pgm(path) {
        return parse_pgm(&fs::read(path)?)?.to_image();
    }
    let (header, data) = read_array(path)?;
    expect_channels(&header, 1)?;
    Image::new(Shape::new(&header.shape)?, data.to_f64()?)
}

/// Writes a `.pgm` (8-bit) or an `f64` raw array, depending on the extension.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    if is_pgm(path) {
        return write_pgm(path, image, 255);
    }
    let header = ArrayHeader::new(image.shape().extents().to_vec(), 1, DType::F64);
    write_array(path, &header, &ArrayData::F64(image.values().to_vec()))
}

pub fn write_pgm(path: &Path, image: &Image, maxval: u16) -> Result<()> {
    fs::write(path, encode_pgm(&Pgm::from_image(image, maxval)?))?;
    Ok(())
}

/// Planar cloud coordinates to the channel-last on-disk layout.
fn interleave(planar: &[f64], channels: usize) -> Vec<f64> {
    let n = planar.len() / channels;
    let mut out = vec![0.0; planar.len()];
    for c in 0..channels {
        for v in 0..n {
            out[v * channels + c] = planar[c * n + v];
        }
    }
    out
}

fn deinterleave(interleaved: &[f64], channels: usize) -> Vec<f64> {
    let n = interleaved.len() / channels;
    let mut out = vec![0.0; interleaved.len()];
    for c in 0..channels {
        for v in 0..n {
            out[c * n + v] = interleaved[v * channels + c];
        }
    }
    out
}

pub fn write_cloud(path: &Path, cloud: &VoxelCloud) -> Result<()> {
    let d = cloud.ndim();
    let header = ArrayHeader::new(cloud.shape().extents().to_vec(), d, DType::F64);
    write_array(path, &header, &ArrayData::F64(interleave(cloud.coords(), d)))
}

pub fn read_cloud(path: &Path) -> Result<VoxelCloud> {
    let (header, data) = read_array(path)?;
    let shape = Shape::new(&header.shape)?;
    expect_channels(&header, shape.ndim())?;
    VoxelCloud::new(shape, deinterleave(&data.to_f64()?, header.channels))
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let header = ArrayHeader::new(labels.shape().extents().to_vec(), 1, DType::U16);
    write_array(path, &header, &ArrayData::U16(labels.labels().to_vec()))
}

/// Reads a `u16` raw label array, or a PGM whose raw sample levels are labels.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    if is_pgm(path) {
        let pgm = parse_pgm(&fs::read(path)?)?;
        return LabelMap::new(Shape::new(&[pgm.height, pgm.width])?, pgm.samples);
    }
    let (header, data) = read_array(path)?;
    expect_channels(&header, 1)?;
    let ArrayData::U16(labels) = data else {
        return Err(Error::DType {
            expected: "u16".into(),
            found: format!("{:?}", data.dtype()).to_lowercase(),
        });
    };
    LabelMap::new(Shape::new(&header.shape)?, labels)
}

pub fn write_jacobian(path: &Path, jac: &JacobianMap) -> Result<()> {
    let header = ArrayHeader::new(jac.shape().extents().to_vec(), 1, DType::F64);
    write_array(path, &header, &ArrayData::F64(jac.dets().to_vec()))
}

pub fn read_jacobian(path: &Path) -> Result<JacobianMap> {
    let (header, data) = read_array(path)?;
    expect_channels(&header, 1)?;
    JacobianMap::new(Shape::new(&header.shape)?, data.to_f64()?)
}

/// Writes `θ` with the model descriptor embedded in the sidecar under `"model"`.
pub fn write_params(path: &Path, model: &VelocityModel) -> Result<()> {
    let mut header = ArrayHeader::new(vec![model.param_count()], 1, DType::F64);
    let desc = serde_json::to_value(model.descriptor()).map_err(std::io::Error::other)?;
    header.extra.insert("model".into(), desc);
    write_array(path, &header, &ArrayData::F64(model.params().to_vec()))
}

pub fn read_params(path: &Path) -> Result<VelocityModel> {
    let (header, data) = read_array(path)?;
    let desc = header
        .extra
        .get("model")
        .ok_or_else(|| Error::MalformedHeader("missing \"model\" descriptor".into()))?;
    let desc: ModelDescriptor =
        serde_json::from_value(desc.clone()).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if desc.param_count != data.len() {
        return Err(Error::mismatch(desc.param_count, data.len()));
    }
    VelocityModel::from_descriptor(&desc)?.with_params(data.to_f64()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_quantization_contract() {
        let shape = Shape::new(&[2, 2]).unwrap();
        let img = Image::new(shape, vec![1.0, 0.0, 0.5, 0.25]).unwrap();
        let pgm = Pgm::from_image(&img, 255).unwrap();
        assert_eq!(pgm.samples, vec![255, 0, 128, 64]);
        let back = parse_pgm(&encode_pgm(&pgm)).unwrap().to_image().unwrap();
        assert_eq!(back.values()[0], 1.0);
        assert_eq!(back.values()[1], 0.0);
    }

    #[test]
    fn pgm_sixteen_bit_round_trip() {
        let pgm = Pgm {
            width: 3,
            height: 2,
            maxval: 65535,
            samples: vec![0, 1, 256, 4000, 65535, 12],
        };
        assert_eq!(parse_pgm(&encode_pgm(&pgm)).unwrap(), pgm);
    }

    #[test]
    fn ascii_pgm_with_comments() {
        let src = b"P2\n# a comment\n3 2 # trailing\n15\n0 1 2\n3 4 15\n";
        let pgm = parse_pgm(src).unwrap();
        assert_eq!((pgm.width, pgm.height, pgm.maxval), (3, 2, 15));
        assert_eq!(pgm.samples, vec![0, 1, 2, 3, 4, 15]);
    }

    #[test]
    fn pgm_errors_are_distinct() {
        assert!(matches!(parse_pgm(b"P6\n2 2\n255\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(parse_pgm(b"P5\n2 2\n0\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(parse_pgm(b"P5\n2 -2\n255\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(
            parse_pgm(b"P5\n2 2\n255\n\x01\x02\x03"),
            Err(Error::Truncated { expected: 4, found: 3 })
        ));
        assert!(matches!(parse_pgm(b"P2\n2 2\n255\n1 2 3"), Err(Error::Truncated { .. })));
        assert!(matches!(parse_pgm(b"P2\n2 1\n9\n1 10"), Err(Error::MalformedPayload(_))));
    }

    #[test]
    fn header_validation() {
        let ok = br#"{"shape":[2,3],"channels":2,"dtype":"f32","order":"row-major"}"#;
        let h = parse_header(ok).unwrap();
        assert_eq!(h.byte_len().unwrap(), 48);
        let bad_order = br#"{"shape":[2,3],"channels":1,"dtype":"f32","order":"col-major"}"#;
        assert!(matches!(parse_header(bad_order), Err(Error::MalformedHeader(_))));
        let bad_dtype = br#"{"shape":[2,3],"channels":1,"dtype":"i8","order":"row-major"}"#;
        assert!(parse_header(bad_dtype).is_err());
        let huge = br#"{"shape":[18446744073709551615,3],"channels":1,"dtype":"f64","order":"row-major"}"#;
        assert!(parse_header(huge).is_err());
    }

    #[test]
    fn truncated_payload_is_not_zero_filled() {
        let h = ArrayHeader::new(vec![2, 2], 1, DType::F64);
        let err = decode_payload(&h, &[0u8; 31]).unwrap_err();
        assert!(matches!(err, Error::Truncated { expected: 32, found: 31 }));
        assert!(matches!(decode_payload(&h, &[0u8; 33]), Err(Error::MalformedPayload(_))));
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let shape = Shape::new(&[3, 4, 2]).unwrap();
        let img = Image::from_fn(shape.clone(), |i| (i[0] as f64).sin() + i[1] as f64 * 1e-7 + i[2] as f64).unwrap();
        let p = dir.path().join("img.raw");
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);

        let cloud = VoxelCloud::new(
            shape.clone(),
            (0..3 * shape.len()).map(|i| i as f64 * 0.123).collect(),
        )
        .unwrap();
        let p = dir.path().join("cloud");
        write_cloud(&p, &cloud).unwrap();
        assert_eq!(read_cloud(&p).unwrap(), cloud);

        let labels = LabelMap::new(shape.clone(), (0..shape.len() as u16).collect()).unwrap();
        let p = dir.path().join("labels.raw");
        write_labels(&p, &labels).unwrap();
        assert_eq!(read_labels(&p).unwrap(), labels);
        // labels are not floats and vice versa
        assert!(matches!(read_image(&p), Err(Error::DType { .. })));
    }

    #[test]
    fn cloud_channels_are_interleaved_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let shape = Shape::new(&[2, 2]).unwrap();
        let cloud = crate::grid::make_identity_grid(&shape);
        let p = dir.path().join("id.raw");
        write_cloud(&p, &cloud).unwrap();
        let (h, data) = read_array(&p).unwrap();
        assert_eq!(h.channels, 2);
        assert_eq!(
            data.to_f64().unwrap(),
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn params_carry_their_descriptor() {
        use crate::velocity::{NeuralFieldSpec, TimeMode};
        let dir = tempfile::tempdir().unwrap();
        let shape = Shape::new(&[8, 8]).unwrap();
        let model = VelocityModel::neural(&shape, NeuralFieldSpec::default(), TimeMode::TimeInjected, 1.0).unwrap();
        let model = model.clone().with_params(model.init_params(3)).unwrap();
        let p = dir.path().join("theta.raw");
        write_params(&p, &model).unwrap();
        assert_eq!(read_params(&p).unwrap(), model);
        let tensor = VelocityModel::tensor(&shape, 3, 1.0).unwrap();
        write_params(&p, &tensor).unwrap();
        assert_eq!(read_params(&p).unwrap(), tensor);
        // a plain array has no descriptor
        write_image(&p, &Image::zeros(shape)).unwrap();
        assert!(matches!(read_params(&p), Err(Error::MalformedHeader(_))));
    }
}
