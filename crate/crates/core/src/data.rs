//! Datasets: synthetic shapes, IDX and CSV ingestion, splits, batching and
//! PGM grid output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Images stored row-major as an `n × height·width` matrix in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, height: usize, width: usize) -> Result<Self> {
        let dim = height * width;
        if dim == 0 {
            return Err(Error::Data("image dimensions must be positive".into()));
        }
        if images.len() != labels.len() * dim {
            return Err(Error::Data(format!(
                "{} pixel values for {} labels of dimension {dim}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            height: self.height,
            width: self.width,
        }
    }

    /// Rows `indices` as a `(len, D)` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let images = self.subset(indices).images;
        Tensor::new([indices.len(), self.dim()], images).expect("non-empty batch")
    }

    pub fn all(&self) -> Tensor {
        Tensor::new([self.len(), self.dim()], self.images.clone()).expect("non-empty dataset")
    }

    /// Concatenation of two datasets with equal image sizes.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Data("image sizes differ".into()));
        }
        let mut images = self.images.clone();
        images.extend_from_slice(&other.images);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Dataset {
            images,
            labels,
            height: self.height,
            width: self.width,
        })
    }
}

/// Filled disk of `radius` centered in a `side × side` image.
pub fn disk_image(side: usize, radius: f64) -> Vec<f64> {
    ring_image(side, radius, f64::INFINITY)
}

/// Annulus with outer radius `outer` and radial `thickness`, centered.
pub fn ring_image(side: usize, outer: f64, thickness: f64) -> Vec<f64> {
    let c = side as f64 / 2.0;
    let inner = outer - thickness;
    let mut img = vec![0.0; side * side];
    for i in 0..side {
        for j in 0..side {
            let (y, x) = (i as f64 + 0.5 - c, j as f64 + 0.5 - c);
            let r = (x * x + y * y).sqrt();
            if r <= outer && r >= inner {
                img[i * side + j] = 1.0;
            }
        }
    }
    img
}

/// Binary images of centered disks (label 0) followed by rings (label 1).
pub fn make_shapes(n_circles: usize, n_rings: usize, side: usize, seed: u64) -> Result<Dataset> {
    if side < 16 {
        return Err(Error::Data(format!("side {side} < 16 cannot resolve the shapes")));
    }
    if n_circles == 0 || n_rings == 0 {
        return Err(Error::Data("need at least one circle and one ring".into()));
    }
    let s = side as f64;
    let (r_lo, r_hi) = (s / 8.0, s / 2.3);
    let mut rng = rng::stream(seed, tag::SHAPES, 0);
    let mut images = Vec::with_capacity((n_circles + n_rings) * side * side);
    let mut labels = Vec::with_capacity(n_circles + n_rings);
    for _ in 0..n_circles {
        let r = rng.random_range(r_lo..=r_hi);
        images.extend(disk_image(side, r));
        labels.push(0);
    }
    for _ in 0..n_rings {
        let r = rng.random_range(r_lo..=r_hi);
        let t_hi = (s / 6.0).min(r / 2.0).max(1.0);
        let t = rng.random_range(1.0..=t_hi);
        images.extend(ring_image(side, r, t));
        labels.push(1);
    }
    Dataset::new(images, labels, side, side)
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))
}

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Raw IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic}, expected {IDX_IMAGES_MAGIC}",
            path.display()
        )));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "{}: expected {} pixel bytes, found {}",
            path.display(),
            n * rows * cols,
            body.len()
        )));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic}, expected {IDX_LABELS_MAGIC}",
            path.display()
        )));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "{}: expected {n} labels, found {}",
            path.display(),
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// IDX image file for `dataset`, pixels scaled to bytes.
pub fn encode_idx_images(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + dataset.images.len());
    for v in [IDX_IMAGES_MAGIC, dataset.len() as u32, dataset.height as u32, dataset.width as u32] {
        out.extend(v.to_be_bytes());
    }
    out.extend(dataset.images.iter().map(|&v| pixel_byte(v)));
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit in a byte")))?);
    }
    Ok(out)
}

/// Writes `dataset` as an IDX image/label pair.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    fs::write(images_path, encode_idx_images(dataset)).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, encode_idx_labels(&dataset.labels)?).map_err(|e| Error::io(labels_path, e))
}

/// Loads `per_class` random samples of each class in `keep_classes` from an
/// IDX image/label pair. Labels are remapped to `0..K` in ascending order of
/// the original class.
pub fn read_idx(
    images_path: &Path,
    labels_path: &Path,
    keep_classes: &[u8],
    per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes, images_path)?;
    let labels = parse_idx_labels(&lbl_bytes, labels_path)?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let mut classes: Vec<u8> = keep_classes.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut by_class: BTreeMap<u8, Vec<usize>> = classes.iter().map(|&c| (c, Vec::new())).collect();
    for (i, l) in labels.iter().enumerate() {
        if let Some(v) = by_class.get_mut(l) {
            v.push(i);
        }
    }
    let dim = rows * cols;
    let mut out_images = Vec::with_capacity(classes.len() * per_class * dim);
    let mut out_labels = Vec::with_capacity(classes.len() * per_class);
    for (k, (class, mut idx)) in by_class.into_iter().enumerate() {
        if idx.len() < per_class {
            return Err(Error::Data(format!(
                "class {class} has {} samples, {per_class} requested",
                idx.len()
            )));
        }
        let mut rng = rng::stream(seed, tag::SELECT, class as u64);
        idx.shuffle(&mut rng);
        idx.truncate(per_class);
        idx.sort_unstable();
        for i in idx {
            out_images.extend(pixels[i * dim..(i + 1) * dim].iter().map(|&b| b as f64 / 255.0));
            out_labels.push(k);
        }
    }
    Dataset::new(out_images, out_labels, rows, cols)
}

/// Raw-matrix CSV: a `height,width` header line, then one image per line.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    let [height, width] = dims[..] else {
        return Err(Error::Format(format!("{}: header must be height,width", path.display())));
    };
    let mut images = Vec::new();
    let mut n = 0;
    for (row, line) in lines.enumerate() {
        let values: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}: row {row}: {e}", path.display())))?;
        if values.len() != height * width {
            return Err(Error::Format(format!(
                "{}: row {row} has {} values, expected {}",
                path.display(),
                values.len(),
                height * width
            )));
        }
        images.extend(values);
        n += 1;
    }
    Dataset::new(images, vec![0; n], height, width)
}

#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub balanced: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
            balanced: true,
        }
    }
}

/// Sorted train and test index lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(labels: &[usize], spec: &SplitSpec) -> Result<SplitIndices> {
    let f = spec.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::Data(format!("train fraction {f} outside (0, 1)")));
    }
    let groups: Vec<Vec<usize>> = if spec.balanced {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let mut g = vec![Vec::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            g[l].push(i);
        }
        g.into_iter().filter(|v| !v.is_empty()).collect()
    } else {
        vec![(0..labels.len()).collect()]
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut idx) in groups.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "group {c} has {} sample(s); a split needs at least 2",
                idx.len()
            )));
        }
        let n_train = ((idx.len() as f64 * f).round() as usize).clamp(1, idx.len() - 1);
        let mut rng = rng::stream(spec.seed, tag::SPLIT, c as u64);
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let idx = split_indices(&dataset.labels, spec)?;
    Ok((dataset.subset(&idx.train), dataset.subset(&idx.test)))
}

/// Shuffled index blocks for one epoch; the last block may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, tag::BATCH, epoch));
    perm.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn pixel_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

/// Tiles `images` (each `height × width`) into a grid with one-pixel zero
/// separators and encodes it as binary PGM.
pub fn encode_pgm_grid(images: &[f64], height: usize, width: usize, cols: usize) -> Result<Vec<u8>> {
    let dim = height * width;
    if dim == 0 || images.is_empty() || images.len() % dim != 0 {
        return Err(Error::Data(format!(
            "{} values do not tile into {height}x{width} images",
            images.len()
        )));
    }
    let m = images.len() / dim;
    let cols = cols.clamp(1, m);
    let rows = m.div_ceil(cols);
    let cw = cols * width + cols - 1;
    let ch = rows * height + rows - 1;
    let mut canvas = vec![0u8; cw * ch];
    for k in 0..m {
        let (gr, gc) = (k / cols, k % cols);
        let (oy, ox) = (gr * (height + 1), gc * (width + 1));
        for i in 0..height {
            for j in 0..width {
                canvas[(oy + i) * cw + ox + j] = pixel_byte(images[k * dim + i * width + j]);
            }
        }
    }
    let mut out = format!("P5\n{cw} {ch}\n255\n").into_bytes();
    out.extend(canvas);
    Ok(out)
}

pub fn write_pgm_grid(images: &[f64], height: usize, width: usize, cols: usize, path: &Path) -> Result<()> {
    let bytes = encode_pgm_grid(images, height, width, cols)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Decodes a binary PGM into `(width, height, values in [0,1])`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format(format!("PGM magic {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("PGM header: {e}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    let body = bytes.get(pos..pos + w * h).ok_or_else(|| Error::Format("truncated PGM body".into()))?;
    Ok((w, h, body.iter().map(|&b| b as f64 / maxval as f64).collect()))
}
