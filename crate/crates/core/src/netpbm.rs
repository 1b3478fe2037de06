//! Binary PPM/PGM images and on-disk datasets.
//!
//! Layout: `{split}/{index:06}_{left|right|disp|seg}.{ppm|pgm}`. Colour
//! images are 8-bit P6; disparity is 16-bit big-endian P5 holding
//! `round(256·d)`; region labels are 8-bit P5.

use std::fs;
use std::path::{Path, PathBuf};

use supforge_tensor::Tensor;

use crate::error::{Error, Result};
use crate::scene::{visibility_from_disparity, RegionLabel, StereoSample};

fn header(magic: &str, w: usize, h: usize, maxval: u32) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes()
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P6 bytes of a `[3, H, W]` image in [0, 1] (values clamped).
pub fn encode_ppm(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut out = header("P6", w, h, 255);
    out.reserve(3 * plane);
    for q in 0..plane {
        for c in 0..3 {
            out.push(to_u8(image.data()[c * plane + q]));
        }
    }
    out
}

/// P5 16-bit big-endian bytes storing `round(256·d)`.
pub fn encode_disparity_pgm(disp: &Tensor) -> Vec<u8> {
    let (h, w) = (disp.shape()[0], disp.shape()[1]);
    let mut out = header("P5", w, h, 65535);
    for &d in disp.data() {
        let v = (256.0 * d).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn encode_label_pgm(labels: &[RegionLabel], h: usize, w: usize) -> Vec<u8> {
    let mut out = header("P5", w, h, 255);
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

struct Parsed<'a> {
    width: usize,
    height: usize,
    maxval: u32,
    body: &'a [u8],
}

fn parse<'a>(path: &Path, bytes: &'a [u8], magic: &str) -> Result<Parsed<'a>> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format(path, "bad header"))?);
    }
    if fields[0] != magic {
        return Err(Error::format(path, format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad header field {s:?}")))
    };
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])? as u32);
    // exactly one whitespace byte separates header and raster
    Ok(Parsed {
        width,
        height,
        maxval,
        body: &bytes[(pos + 1).min(bytes.len())..],
    })
}

pub fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let p = parse(path, bytes, "P6")?;
    if p.maxval != 255 {
        return Err(Error::format(path, "only 8-bit PPM is supported"));
    }
    let plane = p.width * p.height;
    if p.body.len() != 3 * plane {
        return Err(Error::format(path, "raster size mismatch"));
    }
    let mut data = vec![0.0; 3 * plane];
    for q in 0..plane {
        for c in 0..3 {
            data[c * plane + q] = p.body[3 * q + c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, p.height, p.width], data)?)
}

pub fn decode_disparity_pgm(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let p = parse(path, bytes, "P5")?;
    let plane = p.width * p.height;
    if p.maxval != 65535 || p.body.len() != 2 * plane {
        return Err(Error::format(path, "expected 16-bit disparity raster"));
    }
    let data = p
        .body
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 256.0)
        .collect();
    Ok(Tensor::new(&[p.height, p.width], data)?)
}

pub fn decode_label_pgm(path: &Path, bytes: &[u8]) -> Result<(Vec<RegionLabel>, usize, usize)> {
    let p = parse(path, bytes, "P5")?;
    if p.maxval != 255 || p.body.len() != p.width * p.height {
        return Err(Error::format(path, "expected 8-bit label raster"));
    }
    let labels = p
        .body
        .iter()
        .map(|&b| RegionLabel::from_u8(b).ok_or_else(|| Error::format(path, format!("unknown label {b}"))))
        .collect::<Result<_>>()?;
    Ok((labels, p.height, p.width))
}

/// File paths of sample `index` in `split`.
pub fn sample_paths(root: &Path, split: &str, index: usize) -> [PathBuf; 4] {
    let dir = root.join(split);
    [
        dir.join(format!("{index:06}_left.ppm")),
        dir.join(format!("{index:06}_right.ppm")),
        dir.join(format!("{index:06}_disp.pgm")),
        dir.join(format!("{index:06}_seg.pgm")),
    ]
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `samples` under `root/split`; returns the files written.
pub fn save_split(root: &Path, split: &str, samples: &[StereoSample]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(4 * samples.len());
    for (i, s) in samples.iter().enumerate() {
        let [l, r, d, g] = sample_paths(root, split, i);
        write(&l, &encode_ppm(&s.left))?;
        write(&r, &encode_ppm(&s.right))?;
        write(&d, &encode_disparity_pgm(&s.gt_disparity))?;
        write(&g, &encode_label_pgm(&s.region_labels, s.height(), s.width()))?;
        written.extend([l, r, d, g]);
    }
    Ok(written)
}

pub fn load_sample(root: &Path, split: &str, index: usize) -> Result<StereoSample> {
    let [l, r, d, g] = sample_paths(root, split, index);
    let left = decode_ppm(&l, &read(&l)?)?;
    let right = decode_ppm(&r, &read(&r)?)?;
    let gt = decode_disparity_pgm(&d, &read(&d)?)?;
    let (labels, h, w) = decode_label_pgm(&g, &read(&g)?)?;
    if left.shape() != right.shape() || gt.shape() != [h, w] || left.shape()[1..] != [h, w] {
        return Err(Error::format(&l, "sample files disagree on image size"));
    }
    Ok(StereoSample {
        visible: visibility_from_disparity(&gt),
        left,
        right,
        gt_disparity: gt,
        region_labels: labels,
        seed: index as u64,
    })
}

/// Loads every consecutive sample of `split` starting at index 0.
pub fn load_split(root: &Path, split: &str) -> Result<(Vec<StereoSample>, Vec<PathBuf>)> {
    let mut samples = Vec::new();
    let mut files = Vec::new();
    while sample_paths(root, split, samples.len())[0].exists() {
        let idx = samples.len();
        samples.push(load_sample(root, split, idx)?);
        files.extend(sample_paths(root, split, idx));
    }
    if samples.is_empty() {
        let missing = sample_paths(root, split, 0)[0].clone();
        return Err(Error::io(
            missing,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no samples in split"),
        ));
    }
    Ok((samples, files))
}
