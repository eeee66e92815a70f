//! Dataset ingestion: IDX (optionally gzipped) for MNIST-style files, a PGM
//! directory loader for user-supplied image sets, and seeded batching.

use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::one_hot;
use crate::tensor::{Matrix, Scalar, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Side length the network consumes.
pub const INPUT_SIZE: usize = 32;

/// Undecoded `u8` images as stored in an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    pub images: RawImages,
    pub labels: Vec<u8>,
}

/// Images in `[0, 1]`, shaped `[N, 1, 32, 32]`, with class ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// One mini-batch: images `[b, 1, h, w]`, class ids, and the matching one-hot rows.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub targets: Matrix<T>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)
    } else {
        BufReader::new(file).read_to_end(&mut bytes)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            path: path.into(),
            detail: format!("header ends at byte {}", bytes.len()),
        })
}

fn parse_header(bytes: &[u8], path: &Path, expected: u32) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(Error::BadMagic {
            path: path.into(),
            found: magic,
            expected,
        });
    }
    let rank = (magic & 0xff) as usize;
    (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect()
}

fn payload<'a>(bytes: &'a [u8], path: &Path, dims: &[usize]) -> Result<&'a [u8]> {
    let start = 4 + 4 * dims.len();
    let len: usize = dims.iter().product();
    let body = &bytes[start.min(bytes.len())..];
    if body.len() < len {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("expected {len} payload bytes, found {}", body.len()),
        });
    }
    Ok(&body[..len])
}

pub fn read_idx_images(path: &Path) -> Result<RawImages> {
    let bytes = read_file(path)?;
    let dims = parse_header(&bytes, path, IDX_IMAGES_MAGIC)?;
    let pixels = payload(&bytes, path, &dims)?.to_vec();
    Ok(RawImages {
        count: dims[0],
        rows: dims[1],
        cols: dims[2],
        pixels,
    })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let dims = parse_header(&bytes, path, IDX_LABELS_MAGIC)?;
    Ok(payload(&bytes, path, &dims)?.to_vec())
}

/// Reads an image file and its label file and checks that the counts agree.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<RawDataset> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.count != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    Ok(RawDataset { images, labels })
}

pub fn encode_idx_images(images: &RawImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Scales pixels to `[0, 1]` and zero-pads each image to 32x32, centred.
///
/// Only raw `u8` data is accepted, and images must be strictly smaller
/// than the input size, so a dataset cannot be normalized or padded twice.
pub fn prepare(raw: &RawDataset, classes: usize, name: &str) -> Result<Dataset> {
    let RawImages {
        count, rows, cols, ..
    } = raw.images;
    if rows >= INPUT_SIZE
        || cols >= INPUT_SIZE
        || !(INPUT_SIZE - rows).is_multiple_of(2)
        || !(INPUT_SIZE - cols).is_multiple_of(2)
    {
        return Err(Error::InvalidArgument(format!(
            "cannot centre-pad {rows}x{cols} images to {INPUT_SIZE}x{INPUT_SIZE}"
        )));
    }
    if raw.labels.len() != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: raw.labels.len(),
        });
    }
    if let Some(&bad) = raw.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} exceeds {classes} classes"
        )));
    }
    let (top, left) = ((INPUT_SIZE - rows) / 2, (INPUT_SIZE - cols) / 2);
    let plane = INPUT_SIZE * INPUT_SIZE;
    let mut data = vec![0f32; count * plane];
    for (img, dst) in raw
        .images
        .pixels
        .chunks(rows * cols)
        .zip(data.chunks_mut(plane))
    {
        for r in 0..rows {
            for c in 0..cols {
                dst[(r + top) * INPUT_SIZE + c + left] = img[r * cols + c] as f32 / 255.0;
            }
        }
    }
    Ok(Dataset {
        name: name.to_string(),
        images: Tensor::new(&[count, 1, INPUT_SIZE, INPUT_SIZE], data)?,
        labels: raw.labels.iter().map(|&l| l as usize).collect(),
        classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Locates `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` in `dir`.
pub fn find_idx_pair(dir: &Path, split: Split) -> Result<(PathBuf, PathBuf)> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let find = |stem: String| -> Result<PathBuf> {
        [stem.clone(), format!("{stem}.gz")]
            .into_iter()
            .map(|n| dir.join(n))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                Error::io(
                    dir.join(&stem),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found"),
                )
            })
    };
    Ok((
        find(format!("{prefix}-images-idx3-ubyte"))?,
        find(format!("{prefix}-labels-idx1-ubyte"))?,
    ))
}

/// Loads and prepares one split of a 10-class IDX dataset directory.
pub fn load_idx_dir(dir: &Path, split: Split, name: &str) -> Result<Dataset> {
    let (images, labels) = find_idx_pair(dir, split)?;
    prepare(&read_idx(&images, &labels)?, 10, name)
}

/// Loads `dir/<class>/*.pgm` (binary P5, 32x32). Classes are the
/// subdirectory names in sorted order.
pub fn load_pgm_dir(dir: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{} needs at least two class subdirectories",
            dir.display()
        )));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (class, cdir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(cdir)
            .map_err(|e| Error::io(cdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
            .collect();
        files.sort();
        for f in files {
            let (w, h, img) = parse_pgm(&f)?;
            if (w, h) != (INPUT_SIZE, INPUT_SIZE) {
                return Err(Error::Pgm {
                    path: f,
                    detail: format!("expected {INPUT_SIZE}x{INPUT_SIZE}, found {w}x{h}"),
                });
            }
            pixels.extend(img);
            labels.push(class);
        }
    }
    let n = labels.len();
    Ok(Dataset {
        name: dir
            .file_name()
            .map_or("pgm".into(), |s| s.to_string_lossy().into_owned()),
        images: Tensor::new(&[n, 1, INPUT_SIZE, INPUT_SIZE], pixels)?,
        labels,
        classes: class_dirs.len(),
    })
}

/// Parses a binary PGM, returning width, height and pixels scaled by maxval.
pub fn parse_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = read_file(path)?;
    let bad = |detail: &str| Error::Pgm {
        path: path.into(),
        detail: detail.into(),
    };
    // Header: "P5", width, height, maxval, separated by whitespace and comments.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("incomplete header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary (P5) PGM"));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad("non-numeric header field"))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let body = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| bad("truncated pixel data"))?;
    Ok((
        w,
        h,
        body.iter().map(|&p| p as f32 / maxval as f32).collect(),
    ))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copies the listed samples, in the given order, into a new dataset.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok(Dataset {
            name: self.name.clone(),
            images: Tensor::new(&shape, data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// Stratified sample of `per_class` items of every class, kept in original order.
    pub fn subset(&self, per_class: usize, rng: &mut impl Rng) -> Result<Dataset> {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut chosen = Vec::with_capacity(per_class * self.classes);
        for (class, idx) in by_class.iter_mut().enumerate() {
            if idx.len() < per_class {
                return Err(Error::InsufficientSamples {
                    class,
                    available: idx.len(),
                    requested: per_class,
                });
            }
            idx.shuffle(rng);
            chosen.extend_from_slice(&idx[..per_class]);
        }
        chosen.sort_unstable();
        self.select(&chosen)
    }

    /// First `n` samples, unshuffled; a random stratified choice is [`Dataset::subset`].
    pub fn head(&self, n: usize) -> Result<Dataset> {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Batch<T>> {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(
                self.images.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|&v| T::from_f64(v as f64)),
            );
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Batch {
            images: Tensor::new(&shape, data)?,
            targets: one_hot(&labels, self.classes)?,
            labels,
        })
    }
}

/// Splits `0..len` into consecutive batches of `batch_size`, the last one
/// possibly shorter. With a generator the order is shuffled first.
pub fn batches(
    len: usize,
    batch_size: usize,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
