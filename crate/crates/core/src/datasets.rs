//! Dataset ingestion and deterministic class-stratified sampling.
//!
//! Loaders hand pixels through as raw 0–255 values — rescaling belongs to the
//! model's preprocessing layer, never to the loader, because the attack
//! epsilon convention is defined in integer pixel units.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::gradcore::Tensor;

/// Errors from loading, generating, or sampling datasets.
#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    /// A file does not follow its declared byte format.
    Format { detail: String },
    /// Arguments or set contents violate a precondition.
    Invalid { detail: String },
    /// A class has too few members for the requested stratified sample.
    ClassDeficit { class: usize, have: usize, need: usize },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "dataset io: {e}"),
            DataError::Format { detail } => write!(f, "malformed dataset file: {detail}"),
            DataError::Invalid { detail } => write!(f, "invalid dataset request: {detail}"),
            DataError::ClassDeficit { class, have, need } => {
                write!(f, "class {class} has {have} images, {need} required per class")
            }
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// A labeled image collection: images are [n, h, w, c] with values in
/// [0,255], labels fall in [0, class_count).
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    images: Tensor<f32>,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledImageSet {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self, DataError> {
        let shape = images.shape();
        if shape.len() != 4 || shape.iter().any(|&d| d == 0) {
            return Err(DataError::Invalid {
                detail: format!("images must be a nonempty [n,h,w,c] tensor, got {shape:?}"),
            });
        }
        if shape[0] != labels.len() {
            return Err(DataError::Invalid {
                detail: format!("{} images but {} labels", shape[0], labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(DataError::Invalid {
                detail: format!("label {bad} outside [0,{class_count})"),
            });
        }
        if let Some(&bad) = images.data().iter().find(|&&v| !(0.0..=255.0).contains(&v)) {
            return Err(DataError::Invalid {
                detail: format!("pixel value {bad} outside [0,255]"),
            });
        }
        Ok(LabeledImageSet { images, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Image resolution as [h, w, c].
    pub fn dims(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Pixels of image `i`.
    pub fn image(&self, i: usize) -> &[f32] {
        let px = self.dims().iter().product::<usize>();
        &self.images.data()[i * px..(i + 1) * px]
    }

    /// Gathers the given rows into a standalone batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>), DataError> {
        if indices.is_empty() {
            return Err(DataError::Invalid { detail: "empty batch".to_string() });
        }
        let [h, w, c] = self.dims();
        let px = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * px);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::Invalid {
                    detail: format!("index {i} beyond set of {}", self.len()),
                });
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let batch = Tensor::new(vec![indices.len(), h, w, c], data)
            .expect("gathered batch is shape-consistent by construction");
        Ok((batch, labels))
    }

    /// A new set holding copies of the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledImageSet, DataError> {
        let (images, labels) = self.gather(indices)?;
        LabeledImageSet::new(images, labels, self.class_count)
    }
}

/// A deterministic stratified benchmark draw: exactly `k_per_class` images of
/// every class, selection fixed by (seed, source set).
#[derive(Debug, Clone)]
pub struct BenchmarkSample {
    pub set: LabeledImageSet,
    pub k_per_class: usize,
    pub seed: u64,
    /// Row indices into the source set, in sample order.
    pub source_indices: Vec<usize>,
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32, DataError> {
    let slice = bytes.get(offset..offset + 4).ok_or_else(|| DataError::Format {
        detail: format!("{what}: file ends inside the header"),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("slice of 4")))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads the classic big-endian IDX pair (28×28-style grayscale sets):
/// images file magic 0x00000803 with [count, rows, cols], labels file magic
/// 0x00000801 with [count].
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledImageSet, DataError> {
    let img_bytes = fs::read(&images_path)?;
    let magic = be_u32(&img_bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format {
            detail: format!("images magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = be_u32(&img_bytes, 4, "images")? as usize;
    let rows = be_u32(&img_bytes, 8, "images")? as usize;
    let cols = be_u32(&img_bytes, 12, "images")? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Format {
            detail: format!("degenerate image dimensions {count}x{rows}x{cols}"),
        });
    }
    let expected = 16 + count * rows * cols;
    if img_bytes.len() != expected {
        return Err(DataError::Format {
            detail: format!("images payload {} bytes, header implies {expected}", img_bytes.len()),
        });
    }

    let lbl_bytes = fs::read(&labels_path)?;
    let magic = be_u32(&lbl_bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Format {
            detail: format!("labels magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let lbl_count = be_u32(&lbl_bytes, 4, "labels")? as usize;
    if lbl_count != count {
        return Err(DataError::Format {
            detail: format!("{count} images but labels file declares {lbl_count}"),
        });
    }
    if lbl_bytes.len() != 8 + count {
        return Err(DataError::Format {
            detail: format!("labels payload {} bytes, header implies {}", lbl_bytes.len(), 8 + count),
        });
    }

    let data: Vec<f32> = img_bytes[16..].iter().map(|&b| f32::from(b)).collect();
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    let images = Tensor::new(vec![count, rows, cols, 1], data)
        .expect("image byte count validated against header");
    LabeledImageSet::new(images, labels, class_count)
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_CLASSES: usize = 10;

/// Loads CIFAR-10-style binary batches: back-to-back 3073-byte records, one
/// label byte then 3072 channel-planar pixels, reshaped here to 32×32×3.
pub fn load_cifar_binary(
    paths: &[impl AsRef<Path>],
) -> Result<LabeledImageSet, DataError> {
    if paths.is_empty() {
        return Err(DataError::Invalid { detail: "no batch files given".to_string() });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for path in paths {
        let bytes = fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::Format {
                detail: format!(
                    "{} bytes is not a positive multiple of the {CIFAR_RECORD}-byte record",
                    bytes.len()
                ),
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(DataError::Format {
                    detail: format!("label byte {label} >= {CIFAR_CLASSES}"),
                });
            }
            labels.push(label);
            let pixels = &record[1..];
            for y in 0..CIFAR_SIDE {
                for x in 0..CIFAR_SIDE {
                    for ch in 0..3 {
                        data.push(f32::from(pixels[ch * plane + y * CIFAR_SIDE + x]));
                    }
                }
            }
        }
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, CIFAR_SIDE, CIFAR_SIDE, 3], data)
        .expect("record count times record layout is shape-consistent");
    LabeledImageSet::new(images, labels, CIFAR_CLASSES)
}

/// Generates a synthetic blob dataset: each class gets a fixed prototype of a
/// few Gaussian bumps at seeded positions, each sample adds pixel noise, and
/// everything is rounded and clamped into [0,255]. Classes are far apart, so
/// small models separate them quickly — a fast stand-in for file-based sets.
pub fn synth_blobs(
    class_count: usize,
    per_class: usize,
    resolution: [usize; 3],
    seed: u64,
) -> Result<LabeledImageSet, DataError> {
    let [h, w, c] = resolution;
    if class_count == 0 || per_class == 0 || h == 0 || w == 0 || c == 0 {
        return Err(DataError::Invalid {
            detail: format!(
                "all arguments must be positive: {class_count} classes, {per_class} per class, {resolution:?}"
            ),
        });
    }
    let px = h * w * c;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let min_side = h.min(w) as f64;
    let mut prototypes = Vec::with_capacity(class_count);
    for _ in 0..class_count {
        let mut proto = vec![20.0f64; px];
        for _ in 0..3 {
            let cy = rng.gen_range(0.15..0.85) * (h as f64 - 1.0);
            let cx = rng.gen_range(0.15..0.85) * (w as f64 - 1.0);
            let sigma = rng.gen_range(min_side / 10.0..min_side / 4.0);
            let amps: Vec<f64> = (0..c).map(|_| rng.gen_range(60.0..220.0)).collect();
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let bump = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                    for (ch, amp) in amps.iter().enumerate() {
                        proto[(y * w + x) * c + ch] += amp * bump;
                    }
                }
            }
        }
        prototypes.push(proto);
    }

    let noise = Normal::new(0.0f64, 18.0).expect("constant sigma is valid");
    let mut data = Vec::with_capacity(class_count * per_class * px);
    let mut labels = Vec::with_capacity(class_count * per_class);
    for (y, proto) in prototypes.iter().enumerate() {
        for _ in 0..per_class {
            for &base in proto {
                let v = (base + noise.sample(&mut rng)).round().clamp(0.0, 255.0);
                data.push(v as f32);
            }
            labels.push(y);
        }
    }
    let images = Tensor::new(vec![class_count * per_class, h, w, c], data)
        .expect("generated data is shape-consistent");
    LabeledImageSet::new(images, labels, class_count)
}

/// Draws exactly `k_per_class` images of every class, deterministically in
/// `seed`. Classes are emitted in ascending order; within a class the order
/// is the seeded shuffle order.
pub fn sample_benchmark(
    set: &LabeledImageSet,
    k_per_class: usize,
    seed: u64,
) -> Result<BenchmarkSample, DataError> {
    if k_per_class == 0 {
        return Err(DataError::Invalid { detail: "k_per_class must be positive".to_string() });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.class_count()];
    for (i, &y) in set.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut source_indices = Vec::with_capacity(set.class_count() * k_per_class);
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < k_per_class {
            return Err(DataError::ClassDeficit {
                class,
                have: members.len(),
                need: k_per_class,
            });
        }
        // Partial Fisher-Yates: the first k slots become the draw.
        for slot in 0..k_per_class {
            let pick = rng.gen_range(slot..members.len());
            members.swap(slot, pick);
        }
        source_indices.extend_from_slice(&members[..k_per_class]);
    }
    let set = set.subset(&source_indices)?;
    Ok(BenchmarkSample { set, k_per_class, seed, source_indices })
}

const SET_MAGIC: [u8; 4] = *b"ADVD";
const SET_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct SetHeader {
    shape: Vec<usize>,
    class_count: usize,
    labels: Vec<usize>,
}

/// Writes a labeled image set as magic `ADVD`, u32 version, u32 header
/// length, JSON header, then the f32 little-endian pixel blob. Identical
/// sets serialize to identical bytes.
pub fn save_image_set(set: &LabeledImageSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    let header = SetHeader {
        shape: set.images().shape().to_vec(),
        class_count: set.class_count(),
        labels: set.labels().to_vec(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| DataError::Format { detail: format!("header encode: {e}") })?;
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * set.images().numel());
    buf.extend_from_slice(&SET_MAGIC);
    buf.extend_from_slice(&SET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in set.images().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a container written by [`save_image_set`], re-validating shape,
/// label range, and pixel range on the way in.
pub fn load_image_set(path: impl AsRef<Path>) -> Result<LabeledImageSet, DataError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || bytes[..4] != SET_MAGIC {
        return Err(DataError::Format { detail: "bad magic, not an image-set file".to_string() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SET_VERSION {
        return Err(DataError::Format { detail: format!("unsupported version {version}") });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes.get(12..12 + header_len).ok_or_else(|| DataError::Format {
        detail: "file ends inside the header".to_string(),
    })?;
    let header: SetHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| DataError::Format { detail: format!("header decode: {e}") })?;
    let numel: usize = header.shape.iter().product();
    let blob = &bytes[12 + header_len..];
    if blob.len() != 4 * numel {
        return Err(DataError::Format {
            detail: format!(
                "pixel blob is {} bytes, the header promises {}",
                blob.len(),
                4 * numel
            ),
        });
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in blob.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
    }
    let images = Tensor::new(header.shape, data)
        .map_err(|e| DataError::Format { detail: format!("image tensor: {e}") })?;
    LabeledImageSet::new(images, header.labels, header.class_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx_pair(
        dir: &std::path::Path,
        images: &[Vec<u8>],
        rows: usize,
        cols: usize,
        labels: &[u8],
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(images.len() as u32).to_be_bytes());
        img.extend_from_slice(&(rows as u32).to_be_bytes());
        img.extend_from_slice(&(cols as u32).to_be_bytes());
        for image in images {
            img.extend_from_slice(image);
        }
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lbl.extend_from_slice(labels);
        let img_path = dir.join("images.idx");
        let lbl_path = dir.join("labels.idx");
        fs::write(&img_path, img).unwrap();
        fs::write(&lbl_path, lbl).unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn idx_single_image_round_trips_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = vec![0, 17, 255, 128, 1, 99];
        let (ip, lp) = write_idx_pair(dir.path(), &[pixels.clone()], 2, 3, &[4]);
        let set = load_idx(&ip, &lp).unwrap();
        assert_eq!(set.images().shape(), &[1, 2, 3, 1]);
        let expected: Vec<f32> = pixels.iter().map(|&b| f32::from(b)).collect();
        assert_eq!(set.images().data(), &expected[..]);
        assert_eq!(set.labels(), &[4]);
        assert_eq!(set.class_count(), 5);
    }

    #[test]
    fn idx_three_images_get_nhwc_shape() {
        // Three 28x28 images — the shape comes straight from the header.
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<Vec<u8>> = (0..3).map(|i| vec![i as u8; 28 * 28]).collect();
        let (ip, lp) = write_idx_pair(dir.path(), &imgs, 28, 28, &[0, 1, 2]);
        let set = load_idx(&ip, &lp).unwrap();
        assert_eq!(set.images().shape(), &[3, 28, 28, 1]);
        assert_eq!(set.len(), 3);
    }

    #[test]
    fn idx_label_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<Vec<u8>> = (0..3).map(|_| vec![0u8; 4]).collect();
        let (ip, lp) = write_idx_pair(dir.path(), &imgs, 2, 2, &[0, 1]);
        match load_idx(&ip, &lp) {
            Err(DataError::Format { detail }) => assert!(detail.contains("labels"), "{detail}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_bad_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[vec![5u8; 4]], 2, 2, &[1]);
        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        fs::write(&ip, &bytes).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(DataError::Format { .. })));

        let (ip, lp) = write_idx_pair(dir.path(), &[vec![5u8; 4]], 2, 2, &[1]);
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(DataError::Format { .. })));

        let (ip, lp) = write_idx_pair(dir.path(), &[vec![5u8; 4]], 2, 2, &[1]);
        let mut bytes = fs::read(&ip).unwrap();
        bytes.push(0);
        fs::write(&ip, &bytes).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(DataError::Format { .. })));
    }

    fn cifar_record(label: u8, r: u8, g: u8, b: u8) -> Vec<u8> {
        let mut rec = Vec::with_capacity(CIFAR_RECORD);
        rec.push(label);
        rec.extend(std::iter::repeat(r).take(1024));
        rec.extend(std::iter::repeat(g).take(1024));
        rec.extend(std::iter::repeat(b).take(1024));
        rec
    }

    #[test]
    fn cifar_uniform_record_loads_uniform_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        fs::write(&path, cifar_record(3, 7, 7, 7)).unwrap();
        let set = load_cifar_binary(&[&path]).unwrap();
        assert_eq!(set.images().shape(), &[1, 32, 32, 3]);
        assert!(set.images().data().iter().all(|&v| v == 7.0));
        assert_eq!(set.labels(), &[3]);
    }

    #[test]
    fn cifar_two_records_make_two_images() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut bytes = cifar_record(0, 1, 2, 3);
        bytes.extend(cifar_record(9, 4, 5, 6));
        fs::write(&path, bytes).unwrap();
        let set = load_cifar_binary(&[&path]).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.labels(), &[0, 9]);
    }

    #[test]
    fn cifar_channel_planes_unpack_to_interleaved_hwc() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        // Distinct planes; also make one specific position (y=1, x=2)
        // different from the rest of its planes.
        let mut rec = cifar_record(1, 10, 20, 30);
        let plane = 1024;
        let pos = 32 + 2; // y=1, x=2
        rec[1 + pos] = 111; // red plane
        rec[1 + plane + pos] = 122; // green plane
        rec[1 + 2 * plane + pos] = 133; // blue plane
        fs::write(&path, rec).unwrap();
        let set = load_cifar_binary(&[&path]).unwrap();
        let img = set.image(0);
        assert_eq!(&img[..3], &[10.0, 20.0, 30.0], "pixel (0,0)");
        let at = (32 + 2) * 3;
        assert_eq!(&img[at..at + 3], &[111.0, 122.0, 133.0], "pixel (1,2)");
    }

    #[test]
    fn cifar_bad_sizes_and_labels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        fs::write(&path, vec![0u8; CIFAR_RECORD - 1]).unwrap();
        assert!(matches!(load_cifar_binary(&[&path]), Err(DataError::Format { .. })));
        fs::write(&path, cifar_record(10, 0, 0, 0)).unwrap();
        match load_cifar_binary(&[&path]) {
            Err(DataError::Format { detail }) => assert!(detail.contains("label"), "{detail}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn synth_blobs_is_deterministic_and_in_range() {
        let a = synth_blobs(10, 2, [8, 8, 1], 42).unwrap();
        let b = synth_blobs(10, 2, [8, 8, 1], 42).unwrap();
        assert_eq!(a.len(), 20);
        let bits = |s: &LabeledImageSet| {
            s.images().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels(), b.labels());
        let c = synth_blobs(10, 2, [8, 8, 1], 43).unwrap();
        assert_ne!(bits(&a), bits(&c), "seed is ignored");
        for &v in a.images().data() {
            assert!((0.0..=255.0).contains(&v));
            assert_eq!(v, v.round(), "pixels are integer-valued");
        }
    }

    #[test]
    fn synth_blobs_classes_have_distinct_prototypes() {
        let set = synth_blobs(3, 4, [12, 12, 1], 7).unwrap();
        // Mean image per class should differ clearly across classes.
        let px = 12 * 12;
        let mut means = vec![vec![0.0f64; px]; 3];
        for i in 0..set.len() {
            let y = set.labels()[i];
            for (m, &v) in means[y].iter_mut().zip(set.image(i)) {
                *m += f64::from(v) / 4.0;
            }
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                let dist: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
                    / px as f64;
                assert!(dist > 10.0, "classes {a} and {b} are only {dist} apart");
            }
        }
    }

    #[test]
    fn synth_blobs_rejects_zero_arguments() {
        assert!(matches!(synth_blobs(0, 2, [8, 8, 1], 0), Err(DataError::Invalid { .. })));
        assert!(matches!(synth_blobs(2, 0, [8, 8, 1], 0), Err(DataError::Invalid { .. })));
        assert!(matches!(synth_blobs(2, 2, [0, 8, 1], 0), Err(DataError::Invalid { .. })));
    }

    #[test]
    fn benchmark_sample_draws_exactly_k_per_class() {
        let set = synth_blobs(10, 5, [6, 6, 1], 1).unwrap();
        let sample = sample_benchmark(&set, 2, 9).unwrap();
        assert_eq!(sample.set.len(), 20);
        let mut counts = [0usize; 10];
        for &y in sample.set.labels() {
            counts[y] += 1;
        }
        assert!(counts.iter().all(|&k| k == 2), "{counts:?}");
        // Sampled rows really are the claimed source rows.
        for (row, &src) in sample.source_indices.iter().enumerate() {
            assert_eq!(sample.set.image(row), set.image(src));
            assert_eq!(sample.set.labels()[row], set.labels()[src]);
        }
    }

    #[test]
    fn benchmark_sample_is_seed_stable() {
        let set = synth_blobs(4, 6, [6, 6, 1], 3).unwrap();
        let a = sample_benchmark(&set, 2, 5).unwrap();
        let b = sample_benchmark(&set, 2, 5).unwrap();
        assert_eq!(a.source_indices, b.source_indices);
        let c = sample_benchmark(&set, 2, 6).unwrap();
        assert_ne!(a.source_indices, c.source_indices, "seed is ignored");
    }

    #[test]
    fn benchmark_sample_rejects_zero_k_and_reports_deficits() {
        let set = synth_blobs(3, 2, [6, 6, 1], 3).unwrap();
        assert!(matches!(sample_benchmark(&set, 0, 1), Err(DataError::Invalid { .. })));
        match sample_benchmark(&set, 3, 1) {
            Err(DataError::ClassDeficit { class, have, need }) => {
                assert_eq!((class, have, need), (0, 2, 3));
            }
            other => panic!("expected deficit, got {other:?}"),
        }
    }

    #[test]
    fn gather_and_subset_check_bounds() {
        let set = synth_blobs(2, 2, [4, 4, 1], 0).unwrap();
        assert!(matches!(set.gather(&[]), Err(DataError::Invalid { .. })));
        assert!(matches!(set.gather(&[99]), Err(DataError::Invalid { .. })));
        let sub = set.subset(&[3, 0]).unwrap();
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.image(0), set.image(3));
        assert_eq!(sub.image(1), set.image(0));
    }

    #[test]
    fn image_set_container_round_trips_bit_exactly() {
        let set = synth_blobs(3, 4, [5, 6, 2], 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.advd");
        save_image_set(&set, &path).unwrap();
        let back = load_image_set(&path).unwrap();
        assert_eq!(back.images().shape(), set.images().shape());
        assert_eq!(back.images().data(), set.images().data());
        assert_eq!(back.labels(), set.labels());
        assert_eq!(back.class_count(), set.class_count());

        save_image_set(&set, dir.path().join("again.advd")).unwrap();
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(dir.path().join("again.advd")).unwrap(),
            "serialization must be byte-stable"
        );
    }

    #[test]
    fn image_set_container_rejects_corruption() {
        let set = synth_blobs(2, 2, [4, 4, 1], 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.advd");
        save_image_set(&set, &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_image_set(&path), Err(DataError::Format { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        fs::write(&path, &bad_version).unwrap();
        assert!(matches!(load_image_set(&path), Err(DataError::Format { .. })));

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_image_set(&path), Err(DataError::Format { .. })));

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 0]);
        fs::write(&path, &trailing).unwrap();
        assert!(matches!(load_image_set(&path), Err(DataError::Format { .. })));
    }
}
