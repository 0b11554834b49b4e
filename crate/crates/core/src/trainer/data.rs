use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result, SparksError};

/// Labeled `u8` images, `N×C×H×W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    classes: usize,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Parses `shape=<d0,d1,...>;dtype=u8`.
fn parse_meta(text: &str, path: &Path) -> Result<Vec<usize>> {
    let bad = |msg: String| SparksError::InvalidArgument(format!("{}: {msg}", path.display()));
    let mut shape = None;
    let mut dtype = None;
    for part in text.trim().split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = part.split_once('=').ok_or_else(|| bad(format!("malformed entry {part:?}")))?;
        match key.trim() {
            "shape" => {
                let dims = value
                    .split(',')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape {value:?}")))?;
                shape = Some(dims);
            }
            "dtype" => dtype = Some(value.trim().to_string()),
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    if dtype.as_deref() != Some("u8") {
        return Err(bad(format!("dtype must be u8, got {dtype:?}")));
    }
    shape.ok_or_else(|| bad("missing shape".into()))
}

fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let meta = meta_path(path);
    let shape = parse_meta(&std::fs::read_to_string(&meta)?, &meta)?;
    let data = std::fs::read(path)?;
    let expect: usize = shape.iter().product();
    if data.len() != expect {
        return invalid(format!("{}: {} bytes, shape {shape:?} needs {expect}", path.display(), data.len()));
    }
    Ok((shape, data))
}

fn write_tensor(path: &Path, shape: &[usize], data: &[u8]) -> Result<()> {
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    std::fs::write(meta_path(path), format!("shape={};dtype=u8\n", dims.join(",")))?;
    std::fs::write(path, data)?;
    Ok(())
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let item = channels * height * width;
        if item == 0 {
            return invalid("images must have positive dimensions");
        }
        if pixels.len() != labels.len() * item {
            return invalid(format!("{} pixels for {} images of {item}", pixels.len(), labels.len()));
        }
        let classes = labels.iter().max().map_or(0, |&m| usize::from(m) + 1);
        Ok(Dataset {
            channels,
            height,
            width,
            pixels,
            labels,
            classes,
        })
    }

    /// Reads `images` (`shape=N,C,H,W` or `N,H,W`) and `labels` (`shape=N`),
    /// each with a `.meta` sidecar.
    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        let (ishape, pixels) = read_tensor(images)?;
        let (lshape, labels) = read_tensor(labels)?;
        let (n, c, h, w) = match ishape[..] {
            [n, c, h, w] => (n, c, h, w),
            [n, h, w] => (n, 1, h, w),
            _ => return invalid(format!("image shape {ishape:?} must have 3 or 4 dims")),
        };
        if lshape != [n] {
            return invalid(format!("label shape {lshape:?} does not match {n} images"));
        }
        Dataset::new(c, h, w, pixels, labels)
    }

    /// Writes `images.u8` and `labels.u8` plus sidecars into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let n = self.len();
        write_tensor(&dir.join("images.u8"), &[n, self.channels, self.height, self.width], &self.pixels)?;
        write_tensor(&dir.join("labels.u8"), &[n], &self.labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let item = self.channels * self.height * self.width;
        &self.pixels[i * item..(i + 1) * item]
    }

    /// Image `i` scaled to `[−1, 1]`.
    pub fn image(&self, i: usize) -> Vec<f64> {
        self.pixels(i).iter().map(|&p| f64::from(p) / 127.5 - 1.0).collect()
    }
}

/// Seeded single-channel images holding one Gaussian blob whose position
/// depends on the class: class 0 in the upper-left quarter, class 1 in the
/// lower-right.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticBlobs {
    pub side: usize,
    pub sigma: f64,
    /// Half-width of the uniform pixel noise, as a fraction of full scale.
    pub noise: f64,
}

impl Default for SyntheticBlobs {
    fn default() -> Self {
        SyntheticBlobs {
            side: 8,
            sigma: 1.2,
            noise: 0.1,
        }
    }
}

impl SyntheticBlobs {
    pub fn generate(&self, count: usize, seed: u64) -> Result<Dataset> {
        if self.side < 4 {
            return invalid("blob images need a side of at least 4");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = self.side as f64;
        let mut pixels = Vec::with_capacity(count * self.side * self.side);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let label = rng.random_range(0..2u8);
            let (lo, hi) = if label == 0 { (0.0, s / 2.0 - 1.0) } else { (s / 2.0, s - 1.0) };
            let cy = rng.random_range(lo..=hi);
            let cx = rng.random_range(lo..=hi);
            for y in 0..self.side {
                for x in 0..self.side {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let v = (-d2 / (2.0 * self.sigma * self.sigma)).exp() + rng.random_range(-self.noise..=self.noise);
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
            labels.push(label);
        }
        Dataset::new(1, self.side, self.side, pixels, labels)
    }
}
