//! On-disk layout of samples and datasets.
//!
//! A sample directory holds `label_XX.png` (8-bit class ids, one per frame),
//! `frame_XX.png` (8-bit RGB), four SFLO binaries with forward/backward
//! flows and masks, and `sample.txt` with the class metadata. A dataset
//! directory holds one such directory per sample plus `index.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::data::{FlowVolume, FrameSequence, LabelMap, OcclusionVolume, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SFLO_MAGIC: &[u8; 4] = b"SFLO";
pub const SFLO_VERSION: u32 = 1;
const SFLO_HEADER: usize = 16;

pub const INDEX_FILE: &str = "index.txt";
const SAMPLE_META: &str = "sample.txt";
const FLOW_FWD: &str = "flow_fwd.sflo";
const FLOW_BWD: &str = "flow_bwd.sflo";
const OCC_FWD: &str = "occ_fwd.sflo";
const OCC_BWD: &str = "occ_bwd.sflo";

/// Writes a `[T, C, H, W]` tensor as SFLO. The channel count is implied by
/// the file role and checked against the payload size on load.
pub fn write_sflo(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if t.ndim() != 4 {
        return Err(Error::InvalidInput(format!("sflo tensor must be 4-d, got {:?}", t.shape())));
    }
    let (steps, h, w) = (t.dim(0), t.dim(2), t.dim(3));
    let (h16, w16) = match (u16::try_from(h), u16::try_from(w)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(Error::InvalidInput(format!("frame {h}x{w} too large for sflo"))),
    };
    let mut buf = Vec::with_capacity(SFLO_HEADER + 4 * t.numel());
    buf.extend_from_slice(SFLO_MAGIC);
    buf.extend_from_slice(&SFLO_VERSION.to_le_bytes());
    buf.extend_from_slice(&(steps as u32).to_le_bytes());
    buf.extend_from_slice(&h16.to_le_bytes());
    buf.extend_from_slice(&w16.to_le_bytes());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_sflo(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let bytes = read_file(path)?;
    let header = |reason: String| Error::Header {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < SFLO_HEADER {
        return Err(header(format!("file has {} bytes, header needs 16", bytes.len())));
    }
    if &bytes[0..4] != SFLO_MAGIC {
        return Err(header(format!("bad magic {:?}", &bytes[0..4])));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let u16_at = |i: usize| u16::from_le_bytes(bytes[i..i + 2].try_into().expect("2 bytes"));
    let version = u32_at(4);
    if version != SFLO_VERSION {
        return Err(header(format!("unsupported version {version}")));
    }
    let shape = [u32_at(8) as usize, channels, u16_at(12) as usize, u16_at(14) as usize];
    let payload = &bytes[SFLO_HEADER..];
    let n: usize = shape.iter().product();
    if payload.len() != 4 * n {
        return Err(Error::shape(&shape, &[payload.len() / 4]));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::from_vec(&shape, data)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

/// Rounds `[0, 1]` to the nearest byte.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_frame_png(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let (h, w) = (frame.dim(1), frame.dim(2));
    let plane = h * w;
    let d = frame.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([quantize(d[p]), quantize(d[plane + p]), quantize(d[2 * plane + p])])
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Reads an RGB raster as `[3, H, W]` in `[0, 1]`.
pub fn read_frame_png(path: &Path) -> Result<Tensor<f32>> {
    let img = open_image(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut out = vec![0.0f32; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + p] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}

pub fn write_label_png(path: &Path, label: &LabelMap) -> Result<()> {
    let img = GrayImage::from_raw(
        label.width() as u32,
        label.height() as u32,
        label.classes().to_vec(),
    )
    .expect("buffer sized by LabelMap");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_label_png(path: &Path, num_classes: usize, fg: &[u8]) -> Result<LabelMap> {
    let img = open_image(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    LabelMap::new(h, w, img.into_raw(), num_classes, fg)
}

fn label_name(t: usize) -> String {
    format!("label_{t:02}.png")
}

fn frame_name(t: usize) -> String {
    format!("frame_{t:02}.png")
}

fn class_list(fg: &[u8]) -> String {
    fg.iter().map(u8::to_string).collect::<Vec<_>>().join(",")
}

fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn meta_value<'a>(meta: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    meta.get(key).map(String::as_str).ok_or_else(|| Error::Header {
        path: path.to_path_buf(),
        reason: format!("missing key {key}"),
    })
}

fn parse_meta<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<T> {
    meta_value(meta, key, path)?.parse().map_err(|_| Error::Header {
        path: path.to_path_buf(),
        reason: format!("bad value for {key}"),
    })
}

fn parse_classes(s: &str, path: &Path) -> Result<Vec<u8>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|c| {
            c.trim().parse().map_err(|_| Error::Header {
                path: path.to_path_buf(),
                reason: format!("bad class id {c:?}"),
            })
        })
        .collect()
}

pub fn save_sample(dir: &Path, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let steps = sample.steps();
    let meta = format!(
        "t = {steps}\nnum_classes = {}\nfg_classes = {}\n",
        sample.label.num_classes(),
        class_list(sample.label.fg_classes())
    );
    let meta_path = dir.join(SAMPLE_META);
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    write_label_png(&dir.join(label_name(0)), &sample.label)?;
    for (t, l) in sample.step_labels.iter().enumerate() {
        write_label_png(&dir.join(label_name(t + 1)), l)?;
    }
    for t in 0..=steps {
        write_frame_png(&dir.join(frame_name(t)), &sample.frames.frame(t))?;
    }
    write_sflo(&dir.join(FLOW_FWD), &sample.flows.forward)?;
    write_sflo(&dir.join(FLOW_BWD), &sample.flows.backward)?;
    write_sflo(&dir.join(OCC_FWD), &sample.occlusions.forward)?;
    write_sflo(&dir.join(OCC_BWD), &sample.occlusions.backward)
}

pub fn load_sample(dir: &Path) -> Result<Sample> {
    let meta_path = dir.join(SAMPLE_META);
    let meta = parse_kv(&String::from_utf8_lossy(&read_file(&meta_path)?));
    let steps: usize = parse_meta(&meta, "t", &meta_path)?;
    let num_classes: usize = parse_meta(&meta, "num_classes", &meta_path)?;
    let fg = parse_classes(meta_value(&meta, "fg_classes", &meta_path)?, &meta_path)?;

    let label = read_label_png(&dir.join(label_name(0)), num_classes, &fg)?;
    let (h, w) = (label.height(), label.width());
    let mut step_labels = Vec::new();
    for t in 1..=steps {
        let path = dir.join(label_name(t));
        if !path.exists() {
            break;
        }
        let l = read_label_png(&path, num_classes, &fg)?;
        if (l.height(), l.width()) != (h, w) {
            return Err(Error::shape(&[h, w], &[l.height(), l.width()]));
        }
        step_labels.push(l);
    }
    let mut frames = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let f = read_frame_png(&dir.join(frame_name(t)))?;
        f.expect_shape(&[3, h, w])?;
        frames.push(f);
    }
    let refs: Vec<&Tensor<f32>> = frames.iter().collect();
    let frames = FrameSequence::new(Tensor::stack(&refs)?)?;

    let expect = |t: Tensor<f32>, c: usize| -> Result<Tensor<f32>> {
        t.expect_shape(&[steps, c, h, w])?;
        Ok(t)
    };
    let flows = FlowVolume::new(
        expect(read_sflo(&dir.join(FLOW_FWD), 2)?, 2)?,
        expect(read_sflo(&dir.join(FLOW_BWD), 2)?, 2)?,
    )?;
    let occlusions = OcclusionVolume::new(
        expect(read_sflo(&dir.join(OCC_FWD), 1)?, 1)?,
        expect(read_sflo(&dir.join(OCC_BWD), 1)?, 1)?,
    )?;
    Ok(Sample {
        label,
        frames,
        flows,
        occlusions,
        step_labels,
    })
}

/// A dataset directory: free-form metadata plus the ordered sample names.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub meta: BTreeMap<String, String>,
    pub samples: Vec<String>,
}

impl DatasetIndex {
    pub fn write(&self, root: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.meta {
            text.push_str(&format!("# {k} = {v}\n"));
        }
        for s in &self.samples {
            text.push_str(s);
            text.push('\n');
        }
        let path = root.join(INDEX_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = String::from_utf8_lossy(&read_file(&path)?).into_owned();
        let mut meta = BTreeMap::new();
        let mut samples = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
            } else if !line.is_empty() {
                samples.push(line.to_string());
            }
        }
        if samples.is_empty() {
            return Err(Error::Header {
                path,
                reason: "index lists no samples".into(),
            });
        }
        Ok(Self { meta, samples })
    }
}

/// Loads every sample listed in `root/index.txt`, in index order.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    let index = DatasetIndex::read(root)?;
    index
        .samples
        .par_iter()
        .map(|s| load_sample(&root.join(s)))
        .collect()
}

pub fn sample_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("sample_{i:05}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sflo_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::from_fn(&[3, 2, 5, 7], |_| rng.random_range(-40.0f32..40.0));
        let p = dir.path().join("f.sflo");
        write_sflo(&p, &t).unwrap();
        let back = read_sflo(&p, 2).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corrupt_magic_is_header_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.sflo");
        write_sflo(&p, &Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_sflo(&p, 1), Err(Error::Header { .. })));
    }

    #[test]
    fn truncated_payload_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.sflo");
        write_sflo(&p, &Tensor::zeros(&[2, 2, 3, 3])).unwrap();
        assert!(matches!(read_sflo(&p, 1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn half_grey_quantizes_to_128() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.png");
        write_frame_png(&p, &Tensor::full(&[3, 2, 2], 0.5)).unwrap();
        let back = read_frame_png(&p).unwrap();
        assert!(back.data().iter().all(|&v| v == 128.0 / 255.0));
        assert!(back.data().iter().all(|&v| (v - 0.5).abs() <= 1.0 / 255.0));
    }

    #[test]
    fn missing_file_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_sflo(&dir.path().join("nope.sflo"), 2),
            Err(Error::MissingFile(_))
        ));
        assert!(matches!(load_sample(dir.path()), Err(Error::MissingFile(_))));
    }
}
