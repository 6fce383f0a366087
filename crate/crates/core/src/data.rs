//! Datasets: the synthetic gradient-texture images and IDX files.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Images stored as `[H×W×C]` tensors with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset { images: self.images[..n].to_vec(), labels: self.labels[..n].to_vec(), ..self.clone_meta() }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            num_classes: self.num_classes,
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }
}

pub const SYNTHETIC_SIDE: usize = 32;
pub const SYNTHETIC_CLASSES: usize = 10;
/// Vertical and horizontal intensity ramps across the image.
pub const RAMP_ROWS: f64 = 0.8;
pub const RAMP_COLS: f64 = 0.1;
pub const TEXTURE_AMPLITUDE: f64 = 0.1;
pub const NOISE_STD: f64 = 0.004;

/// Spatial frequencies (cycles per pixel) of each textured class. Every
/// texture averages to exactly zero over any aligned 4×4 patch, so patch
/// means carry the ramp alone.
const TEXTURES: [(f64, f64, bool); 9] = [
    (0.25, 0.0, false),
    (0.5, 0.0, false),
    (0.0, 0.25, false),
    (0.0, 0.5, false),
    (0.25, 0.25, false),
    (0.25, 0.5, false),
    (0.5, 0.25, false),
    (0.5, 0.5, false),
    (0.25, -0.25, true),
];

/// Phase shared by every texture; keeps the half-cycle-per-pixel waves off their zeros.
const PHASE: f64 = PI / 4.0;

fn texture(class: usize, r: f64, c: f64) -> f64 {
    if class == 0 {
        return 0.0;
    }
    let (fr, fc, diagonal) = TEXTURES[class - 1];
    if diagonal {
        (2.0 * PI * (fr * r + fc * c) + PHASE).cos()
    } else {
        let a = if fr == 0.0 { 1.0 } else { (2.0 * PI * fr * r + PHASE).cos() };
        let b = if fc == 0.0 { 1.0 } else { (2.0 * PI * fc * c + PHASE).cos() };
        a * b
    }
}

/// `count` 32×32 grayscale images, `pixel(r, c) = 0.05 + a·r + b·c +
/// texture_class(r, c) + noise`, with ten balanced classes: class 0 is
/// untextured, classes 1–9 carry a fixed sinusoid whose period divides the
/// 4-pixel patch side.
pub fn make_synthetic(count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("synthetic dataset needs at least one image".into()));
    }
    let side = SYNTHETIC_SIDE;
    let a = RAMP_ROWS / (side - 1) as f64;
    let b = RAMP_COLS / (side - 1) as f64;
    let mut labels: Vec<usize> = (0..count).map(|i| i % SYNTHETIC_CLASSES).collect();
    labels.shuffle(&mut stream(seed, "synthetic/labels", &[]));
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &class)| {
            let mut rng = stream(seed, "synthetic/image", &[i as u64]);
            let mut data = Vec::with_capacity(side * side);
            for r in 0..side {
                for c in 0..side {
                    let (rf, cf) = (r as f64, c as f64);
                    let v = 0.05 + a * rf + b * cf + TEXTURE_AMPLITUDE * texture(class, rf, cf);
                    data.push(v + noise.sample(&mut rng));
                }
            }
            Tensor::new(vec![side, side, 1], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { images, labels, num_classes: SYNTHETIC_CLASSES, height: side, width: side, channels: 1 })
}

fn read_header(bytes: &[u8], magic_type: u8, what: &str) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!("{what}: expected at least 4 header bytes, found {}", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != magic_type {
        return Err(Error::Format(format!(
            "{what}: bad magic {:02x}{:02x}{:02x}{:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Format(format!("{what}: expected {header} header bytes, found {}", bytes.len())));
    }
    let dims = (0..ndims)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize)
        .collect();
    Ok((dims, header))
}

fn check_payload(bytes: &[u8], header: usize, dims: &[usize], what: &str) -> Result<()> {
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Format(format!("{what}: expected {expected} bytes, found {}", bytes.len())));
    }
    Ok(())
}

/// Parses IDX image (`0x00000803`, or `0x00000804` with a channel axis) and
/// label (`0x00000801`) buffers. Pixels are scaled to `[0, 1]`.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (idims, ihead) = read_header(image_bytes, 0x08, "image file")?;
    let channels = match idims.len() {
        3 => 1,
        4 => idims[3],
        n => return Err(Error::Format(format!("image file: expected 3 or 4 dimensions, found {n}"))),
    };
    check_payload(image_bytes, ihead, &idims, "image file")?;
    let (ldims, lhead) = read_header(label_bytes, 0x08, "label file")?;
    if ldims.len() != 1 {
        return Err(Error::Format(format!("label file: expected 1 dimension, found {}", ldims.len())));
    }
    check_payload(label_bytes, lhead, &ldims, "label file")?;
    let (count, height, width) = (idims[0], idims[1], idims[2]);
    if ldims[0] != count {
        return Err(Error::Format(format!("{count} images but {} labels", ldims[0])));
    }
    if count == 0 || height == 0 || width == 0 || channels == 0 {
        return Err(Error::Format("image file holds an empty dimension".into()));
    }
    let per = height * width * channels;
    let images = (0..count)
        .map(|i| {
            let px = &image_bytes[ihead + i * per..ihead + (i + 1) * per];
            Tensor::new(vec![height, width, channels], px.iter().map(|&v| v as f64 / 255.0).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = label_bytes[lhead..].iter().map(|&v| v as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset { images, labels, num_classes, height, width, channels })
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    parse_idx(&std::fs::read(images)?, &std::fs::read(labels)?)
}

/// Resolves a dataset spec: `synthetic:<seed>:<count>`, `images,labels`
/// paths, or a single IDX image path whose label file is found by replacing
/// `images`→`labels` and `idx3`→`idx1` in the file name.
pub fn load_dataset(spec: &str) -> Result<Dataset> {
    if let Some(rest) = spec.strip_prefix("synthetic") {
        let parts: Vec<&str> = rest.split(':').skip(1).collect();
        let parse = |s: &str, what: &str| {
            s.parse::<u64>().map_err(|_| Error::Config(format!("dataset `{spec}`: bad {what} `{s}`")))
        };
        return match parts.as_slice() {
            [] => make_synthetic(512, 1),
            [seed] => make_synthetic(512, parse(seed, "seed")?),
            [seed, count] => make_synthetic(parse(count, "count")? as usize, parse(seed, "seed")?),
            _ => Err(Error::Config(format!("dataset `{spec}`: expected synthetic:<seed>:<count>"))),
        };
    }
    if let Some((img, lbl)) = spec.split_once(',') {
        return load_idx(Path::new(img.trim()), Path::new(lbl.trim()));
    }
    let img = Path::new(spec);
    let name = img
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("dataset `{spec}` is not a file path")))?;
    let label_name = name.replace("images", "labels").replace("idx3", "idx1");
    if label_name == name {
        return Err(Error::Config(format!("cannot infer a label file for `{spec}`; pass `images,labels`")));
    }
    load_idx(img, &img.with_file_name(label_name))
}
