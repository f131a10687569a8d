//! Dataset container, binary file format, synthetic generator, and epoch
//! batching.
//!
//! Files use the `.mmfv` layout, all little-endian: a header (magic
//! `MMFV1`, format version u32, video count u32, visual dim u32, audio dim
//! u32, class count u32) followed by one block per video: id length u32 +
//! id bytes, frame count u32, label count u32 + label u32s, then the
//! visual frames (N x C f32, row-major) and audio frames (N x M f32).
//! Features are stored as 32-bit floats on disk and widened to 64-bit in
//! memory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::aggregation::sample_frames;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, Rng};

const MAGIC: &[u8; 5] = b"MMFV1";
const FORMAT_VERSION: u32 = 1;

// Stream tags for deriving independent generator seeds.
const STREAM_CLASS_MAPS: u64 = 1;
const STREAM_VIDEOS: u64 = 2;

/// One video: per-frame features for both modalities plus its label set.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: Vec<u8>,
    pub visual: Matrix,
    pub audio: Matrix,
    /// Strictly increasing class indices, each `< num_classes`.
    pub labels: Vec<u32>,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.visual.rows()
    }

    fn validate(&self, classes: usize) -> Result<()> {
        if self.visual.rows() == 0 {
            return Err(Error::Format(format!(
                "record {:?} has no frames",
                String::from_utf8_lossy(&self.id)
            )));
        }
        if self.visual.rows() != self.audio.rows() {
            return Err(Error::Format(format!(
                "record {:?}: {} visual frames vs {} audio frames",
                String::from_utf8_lossy(&self.id),
                self.visual.rows(),
                self.audio.rows()
            )));
        }
        for pair in self.labels.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Format(
                    "labels must be strictly increasing".to_string(),
                ));
            }
        }
        if let Some(&max) = self.labels.last() {
            if max as usize >= classes {
                return Err(Error::Format(format!(
                    "label {max} out of range for {classes} classes"
                )));
            }
        }
        Ok(())
    }
}

/// An in-memory dataset with uniform feature dimensions.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub num_classes: usize,
    pub records: Vec<VideoRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Label sets of every record, for the metric.
    pub fn label_sets(&self) -> Vec<Vec<u32>> {
        self.records.iter().map(|r| r.labels.clone()).collect()
    }

    /// Binary label matrix for the records at `indices`.
    pub fn label_matrix(&self, indices: &[usize]) -> Matrix {
        let mut labels = Matrix::zeros(indices.len(), self.num_classes);
        for (row, &idx) in indices.iter().enumerate() {
            for &class in &self.records[idx].labels {
                labels.set(row, class as usize, 1.0);
            }
        }
        labels
    }

    /// Keeps only the first `n` records.
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            visual_dim: self.visual_dim,
            audio_dim: self.audio_dim,
            num_classes: self.num_classes,
            records: self.records[..n.min(self.records.len())].to_vec(),
        }
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("unexpected end of file".to_string()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32_matrix(r: &mut impl Read, rows: usize, cols: usize) -> Result<Matrix> {
    let mut buf = vec![0u8; rows * cols * 4];
    read_exact(r, &mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Writes a dataset to `path` in the `.mmfv` layout.
pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    for rec in &ds.records {
        rec.validate(ds.num_classes)?;
        if rec.visual.cols() != ds.visual_dim || rec.audio.cols() != ds.audio_dim {
            return Err(Error::Format(format!(
                "record {:?} has dims {}/{}, dataset declares {}/{}",
                String::from_utf8_lossy(&rec.id),
                rec.visual.cols(),
                rec.audio.cols(),
                ds.visual_dim,
                ds.audio_dim
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, ds.records.len() as u32)?;
    write_u32(&mut w, ds.visual_dim as u32)?;
    write_u32(&mut w, ds.audio_dim as u32)?;
    write_u32(&mut w, ds.num_classes as u32)?;
    for rec in &ds.records {
        write_u32(&mut w, rec.id.len() as u32)?;
        w.write_all(&rec.id)?;
        write_u32(&mut w, rec.num_frames() as u32)?;
        write_u32(&mut w, rec.labels.len() as u32)?;
        for &label in &rec.labels {
            write_u32(&mut w, label)?;
        }
        write_f32s(&mut w, rec.visual.data())?;
        write_f32s(&mut w, rec.audio.data())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `.mmfv` dataset, validating the header and every record.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let visual_dim = read_u32(&mut r)? as usize;
    let audio_dim = read_u32(&mut r)? as usize;
    let num_classes = read_u32(&mut r)? as usize;

    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        read_exact(&mut r, &mut id)?;
        let frames = read_u32(&mut r)? as usize;
        let label_count = read_u32(&mut r)? as usize;
        let mut labels = Vec::with_capacity(label_count);
        for _ in 0..label_count {
            labels.push(read_u32(&mut r)?);
        }
        let visual = read_f32_matrix(&mut r, frames, visual_dim)?;
        let audio = read_f32_matrix(&mut r, frames, audio_dim)?;
        let rec = VideoRecord {
            id,
            visual,
            audio,
            labels,
        };
        rec.validate(num_classes)?;
        records.push(rec);
    }
    Ok(Dataset {
        visual_dim,
        audio_dim,
        num_classes,
        records,
    })
}

/// Recipe for a synthetic dataset whose labels depend on a planted bilinear
/// interaction between the two modalities.
///
/// Per video, latents `z_v` and `z_a` are drawn standard normal; class `j`
/// is active iff `sigmoid(score_j) > tau` where `score_j` is a random
/// rank-`rank` bilinear form of the latents. Frames are the latents plus
/// per-frame Gaussian noise. The planted forms depend only on `seed`, so
/// disjoint splits that share the task are produced by varying
/// `first_index` under one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub videos: usize,
    pub classes: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub rank: usize,
    pub noise: f64,
    pub frames_min: usize,
    pub frames_max: usize,
    pub tau: f64,
    pub seed: u64,
    pub first_index: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            videos: 2500,
            classes: 10,
            visual_dim: 32,
            audio_dim: 8,
            rank: 2,
            noise: 0.1,
            frames_min: 5,
            frames_max: 20,
            tau: DEFAULT_TAU,
            seed: 7,
            first_index: 0,
        }
    }
}

/// Threshold calibrated so the default spec plants about 3 labels per video
/// over 10 classes (prevalence ~= 0.3 per class).
pub const DEFAULT_TAU: f64 = 0.585;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.videos == 0 {
            return Err(Error::InvalidArg("synthetic spec: videos must be > 0".into()));
        }
        if self.classes == 0 || self.visual_dim == 0 || self.audio_dim == 0 {
            return Err(Error::InvalidArg(
                "synthetic spec: classes and feature dims must be > 0".into(),
            ));
        }
        if self.rank == 0 {
            return Err(Error::InvalidArg("synthetic spec: rank must be >= 1".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::InvalidArg("synthetic spec: noise must be >= 0".into()));
        }
        if self.frames_min == 0 || self.frames_max < self.frames_min {
            return Err(Error::InvalidArg(
                "synthetic spec: need 1 <= frames_min <= frames_max".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::InvalidArg("synthetic spec: tau must be in (0, 1)".into()));
        }
        Ok(())
    }
}

struct ClassMap {
    visual_factors: Vec<Vec<f64>>,
    audio_factors: Vec<Vec<f64>>,
}

impl ClassMap {
    fn draw(spec: &SyntheticSpec, class: usize) -> ClassMap {
        let mut rng = Rng::new(derive_seed(derive_seed(spec.seed, STREAM_CLASS_MAPS), class as u64));
        let unit = |rng: &mut Rng, dim: usize| {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            v
        };
        ClassMap {
            visual_factors: (0..spec.rank).map(|_| unit(&mut rng, spec.visual_dim)).collect(),
            audio_factors: (0..spec.rank).map(|_| unit(&mut rng, spec.audio_dim)).collect(),
        }
    }

    /// `sum_r (u_r . z_v)(v_r . z_a) / sqrt(rank)`; unit variance-ish.
    fn score(&self, z_v: &[f64], z_a: &[f64]) -> f64 {
        let total: f64 = self
            .visual_factors
            .iter()
            .zip(&self.audio_factors)
            .map(|(u, v)| {
                let lu: f64 = u.iter().zip(z_v).map(|(a, b)| a * b).sum();
                let av: f64 = v.iter().zip(z_a).map(|(a, b)| a * b).sum();
                lu * av
            })
            .sum();
        total / (self.visual_factors.len() as f64).sqrt()
    }
}

/// Generates a synthetic dataset. Deterministic for a given spec; per-video
/// seeds are derived from `(seed, first_index + v)`, so generation order
/// never matters.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let maps: Vec<ClassMap> = (0..spec.classes).map(|j| ClassMap::draw(spec, j)).collect();
    let video_stream = derive_seed(spec.seed, STREAM_VIDEOS);

    let mut records = Vec::with_capacity(spec.videos);
    for v in 0..spec.videos {
        let global_index = spec.first_index + v;
        let mut rng = Rng::new(derive_seed(video_stream, global_index as u64));
        let z_v: Vec<f64> = (0..spec.visual_dim).map(|_| rng.normal()).collect();
        let z_a: Vec<f64> = (0..spec.audio_dim).map(|_| rng.normal()).collect();

        let labels: Vec<u32> = maps
            .iter()
            .enumerate()
            .filter(|(_, map)| {
                let s = map.score(&z_v, &z_a);
                1.0 / (1.0 + (-s).exp()) > spec.tau
            })
            .map(|(j, _)| j as u32)
            .collect();

        let frames = if spec.frames_max > spec.frames_min {
            spec.frames_min + rng.below(spec.frames_max - spec.frames_min + 1)
        } else {
            spec.frames_min
        };
        let mut visual = Matrix::zeros(frames, spec.visual_dim);
        for r in 0..frames {
            let row = visual.row_mut(r);
            for (slot, &z) in row.iter_mut().zip(&z_v) {
                *slot = z + spec.noise * rng.normal();
            }
        }
        let mut audio = Matrix::zeros(frames, spec.audio_dim);
        for r in 0..frames {
            let row = audio.row_mut(r);
            for (slot, &z) in row.iter_mut().zip(&z_a) {
                *slot = z + spec.noise * rng.normal();
            }
        }

        records.push(VideoRecord {
            id: format!("v{global_index:06}").into_bytes(),
            visual,
            audio,
            labels,
        });
    }
    Ok(Dataset {
        visual_dim: spec.visual_dim,
        audio_dim: spec.audio_dim,
        num_classes: spec.classes,
        records,
    })
}

/// One training minibatch: per-video sampled frames plus the label matrix.
#[derive(Debug, Clone)]
pub struct Batch {
    pub visual: Vec<Matrix>,
    pub audio: Vec<Matrix>,
    pub labels: Matrix,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.visual.len()
    }
}

/// Iterator over one shuffled epoch; the final short batch is included.
/// Frame sampling draws from the same generator as the shuffle, so a batch
/// stream is a pure function of the generator seed.
pub struct EpochBatches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    frames_target: usize,
    rng: Rng,
    cursor: usize,
}

/// Lays out one epoch of shuffled minibatches.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    frames_target: usize,
    mut rng: Rng,
) -> EpochBatches<'_> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut order);
    EpochBatches {
        dataset,
        order,
        batch_size,
        frames_target,
        rng,
        cursor: 0,
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let mut visual = Vec::with_capacity(indices.len());
        let mut audio = Vec::with_capacity(indices.len());
        for &idx in &indices {
            let rec = &self.dataset.records[idx];
            visual.push(sample_frames(&rec.visual, self.frames_target, &mut self.rng));
            audio.push(sample_frames(&rec.audio, self.frames_target, &mut self.rng));
        }
        let labels = self.dataset.label_matrix(&indices);
        Some(Batch {
            visual,
            audio,
            labels,
            indices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(seed: u64) -> Dataset {
        let spec = SyntheticSpec {
            videos: 10,
            classes: 4,
            visual_dim: 6,
            audio_dim: 3,
            frames_min: 2,
            frames_max: 5,
            seed,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec).unwrap()
    }

    #[test]
    fn round_trip_preserves_records_through_f32() {
        let ds = tiny_dataset(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mmfv");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.visual_dim, ds.visual_dim);
        assert_eq!(back.num_classes, ds.num_classes);
        for (a, b) in ds.records.iter().zip(&back.records) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.labels, b.labels);
            // Values round-trip through 32-bit precision exactly.
            for (x, y) in a.visual.data().iter().zip(b.visual.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
            for (x, y) in a.audio.data().iter().zip(b.audio.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn truncated_file_is_a_clean_error() {
        let ds = tiny_dataset(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mmfv");
        write_dataset(&path, &ds).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.mmfv");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        let err = read_dataset(&cut).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mmfv");
        std::fs::write(&path, b"NOTMAGIC-and-more-bytes").unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "got {err}");
    }

    #[test]
    fn empty_dataset_header_round_trips() {
        let ds = Dataset {
            visual_dim: 8,
            audio_dim: 2,
            num_classes: 5,
            records: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.mmfv");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.visual_dim, 8);
        assert_eq!(back.num_classes, 5);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = tiny_dataset(3);
        let b = tiny_dataset(3);
        assert_eq!(a.records, b.records);
        let c = tiny_dataset(4);
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn zero_noise_repeats_the_latent() {
        let spec = SyntheticSpec {
            videos: 3,
            noise: 0.0,
            frames_min: 4,
            frames_max: 4,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        for rec in &ds.records {
            for r in 1..rec.num_frames() {
                assert_eq!(rec.visual.row(r), rec.visual.row(0));
                assert_eq!(rec.audio.row(r), rec.audio.row(0));
            }
        }
    }

    #[test]
    fn disjoint_splits_share_the_planted_maps() {
        // Same seed, different first_index: different videos, same task.
        let train = generate_synthetic(&SyntheticSpec {
            videos: 5,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let val = generate_synthetic(&SyntheticSpec {
            videos: 5,
            first_index: 5,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let all = generate_synthetic(&SyntheticSpec {
            videos: 10,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_eq!(train.records[..], all.records[..5]);
        assert_eq!(val.records[..], all.records[5..]);
        for (a, b) in train.records.iter().zip(&val.records) {
            assert_ne!(a.id, b.id);
        }
    }

    #[test]
    fn default_tau_gives_sane_per_class_prevalence() {
        let spec = SyntheticSpec {
            videos: 1000,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let mut counts = vec![0usize; spec.classes];
        for rec in &ds.records {
            for &l in &rec.labels {
                counts[l as usize] += 1;
            }
        }
        for (j, &n) in counts.iter().enumerate() {
            let prevalence = n as f64 / 1000.0;
            assert!(
                (0.05..=0.95).contains(&prevalence),
                "class {j} prevalence {prevalence}"
            );
        }
        let mean_labels: f64 = counts.iter().sum::<usize>() as f64 / 1000.0;
        assert!(
            (2.0..=4.0).contains(&mean_labels),
            "mean labels per video {mean_labels}"
        );
    }

    #[test]
    fn batch_sizes_follow_remainder_arithmetic() {
        let ds = tiny_dataset(5);
        let sizes: Vec<usize> = batches(&ds, 4, 3, Rng::new(1)).map(|b| b.size()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn epoch_visits_every_record_once() {
        let ds = tiny_dataset(6);
        let mut seen: Vec<usize> = batches(&ds, 3, 2, Rng::new(2))
            .flat_map(|b| b.indices.clone())
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn shuffles_differ_between_epochs_but_reproduce_per_seed() {
        let ds = tiny_dataset(7);
        let order = |seed: u64| -> Vec<usize> {
            batches(&ds, 10, 2, Rng::new(seed))
                .flat_map(|b| b.indices.clone())
                .collect()
        };
        assert_eq!(order(10), order(10));
        assert_ne!(order(10), order(11));
    }

    #[test]
    fn batch_frames_match_target() {
        let ds = tiny_dataset(8);
        for batch in batches(&ds, 4, 7, Rng::new(3)) {
            for m in batch.visual.iter().chain(&batch.audio) {
                assert_eq!(m.rows(), 7);
            }
        }
    }
}
