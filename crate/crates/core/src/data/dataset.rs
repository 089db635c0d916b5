//! `DBPTNSR1` image tensor files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "DBPTNSR1"
//! count    u32
//! channels u32
//! height   u32
//! width    u32
//! dtype    u8       0 = f32
//! payload  count * channels * height * width values
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array3, ArrayView3};

use crate::error::{DbpError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"DBPTNSR1";
pub const DATASET_HEADER_LEN: usize = 8 + 4 * 4 + 1;
const DTYPE_F32: u8 = 0;

/// An immutable stack of equally shaped `C x H x W` images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || !data.len().is_multiple_of(per) {
            return Err(DbpError::Shape(format!(
                "{} values do not form whole {channels}x{height}x{width} images",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn image(&self, index: usize) -> ArrayView3<'_, f32> {
        let n = self.image_len();
        ArrayView3::from_shape(
            (self.channels, self.height, self.width),
            &self.data[index * n..(index + 1) * n],
        )
        .expect("image slice matches its shape")
    }

    pub fn image_f64(&self, index: usize) -> Array3<f64> {
        self.image(index).mapv(f64::from)
    }

    /// Splits off the last `ceil(fraction * len)` images for validation.
    ///
    /// Returns `(train, validation)` index lists.
    pub fn split_tail(&self, fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(DbpError::Config(format!(
                "validation fraction must be in [0, 1), got {fraction}"
            )));
        }
        let n = self.len();
        let n_val = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
        let n_val = n_val.min(n.saturating_sub(1));
        Ok(((0..n - n_val).collect(), (n - n_val..n).collect()))
    }

    /// Per-channel mean and population standard deviation over `indices`.
    pub fn channel_stats(&self, indices: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let plane = self.height * self.width;
        let mut sum = vec![0.0; self.channels];
        let mut sum_sq = vec![0.0; self.channels];
        for &i in indices {
            let img = &self.data[i * self.image_len()..(i + 1) * self.image_len()];
            for c in 0..self.channels {
                for &v in &img[c * plane..(c + 1) * plane] {
                    let v = f64::from(v);
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
        }
        let n = (indices.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt())
            .collect();
        (mean, std)
    }
}

pub fn save_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut buf = Vec::with_capacity(DATASET_HEADER_LEN + 4 * data.data.len());
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [data.len(), data.channels, data.height, data.width] {
        let v = u32::try_from(v)
            .map_err(|_| DbpError::Shape(format!("dimension {v} does not fit in u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(DTYPE_F32);
    for v in &data.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..8] != DATASET_MAGIC {
        return Err(DbpError::BadMagic {
            path: path.to_path_buf(),
            expected: "DBPTNSR1",
        });
    }
    if bytes.len() < DATASET_HEADER_LEN {
        return Err(DbpError::LengthMismatch {
            expected: DATASET_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let field = |i: usize| {
        let at = 8 + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as u64
    };
    let (count, channels, height, width) = (field(0), field(1), field(2), field(3));
    let dtype = bytes[DATASET_HEADER_LEN - 1];
    if dtype != DTYPE_F32 {
        return Err(DbpError::DtypeMismatch(dtype));
    }
    let expected = 4 * count * channels * height * width;
    let found = (bytes.len() - DATASET_HEADER_LEN) as u64;
    if expected != found {
        return Err(DbpError::LengthMismatch { expected, found });
    }
    let data = bytes[DATASET_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Dataset::new(channels as usize, height as usize, width as usize, data)
}
