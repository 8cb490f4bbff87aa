//! Synthetic images of textured parts whose arrangement is the class.
//!
//! The image is divided into an `n × n` grid of cells. Class `k` places part
//! `g` in cell `(g + k) mod n²`, jittered inside the cell, so the class is a
//! spatial arrangement and every part appears in every cell across classes.
//! Parts differ in color and stripe pattern. Layout (labels, jitter) and
//! texture noise come from separate random streams.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use stra_core::{DType, Rng, Tensor};

use crate::error::{invalid, io_at, HarnessError, Result};

pub const DATASET_MAGIC: &[u8; 5] = b"STRD1";

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Square image side in pixels.
    pub size: usize,
    /// Parts per image.
    pub parts: usize,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    /// Square part side in pixels.
    pub part_size: usize,
    /// Maximum offset of a part from its cell center, in pixels.
    pub jitter: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            size: 32,
            parts: 4,
            classes: 4,
            train: 2048,
            test: 512,
            part_size: 6,
            jitter: 2,
            noise: 0.3,
            seed: 1,
        }
    }
}

impl DataConfig {
    /// Cells per side of the placement grid.
    pub fn grid(&self) -> usize {
        let slots = self.parts.max(self.classes);
        (1..).find(|n| n * n >= slots).expect("grid side exists")
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts == 0 || self.classes == 0 || self.part_size == 0 {
            return Err(invalid("data: parts, classes and part_size must be positive"));
        }
        if self.train == 0 || self.test == 0 {
            return Err(invalid("data: train and test sizes must be positive"));
        }
        if self.size < 4 * self.part_size {
            return Err(invalid(format!(
                "data: image size {} must be at least 4x the part size {}",
                self.size, self.part_size
            )));
        }
        if self.parts * self.part_size * self.part_size >= self.size * self.size {
            return Err(invalid("data: parts cover the whole image"));
        }
        let cell = self.size / self.grid();
        if cell < self.part_size {
            return Err(invalid(format!(
                "data: infeasible packing, {} parts of size {} in {}x{} cells of {} pixels",
                self.parts,
                self.part_size,
                self.grid(),
                self.grid(),
                cell
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(invalid("data: noise must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartsDataset {
    /// `(N, 3, size, size)`; every value is exactly representable as `f32`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Per image, the `(row, col)` center of each part in pixel units, part
    /// order. For evaluation only.
    pub part_positions: Vec<Vec<(f64, f64)>>,
    pub classes: usize,
    pub part_size: usize,
}

impl PartsDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn parts(&self) -> usize {
        self.part_positions.first().map_or(0, Vec::len)
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.images.shape();
        let plane = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
        }
        let images = Tensor::new(vec![indices.len(), s[1], s[2], s[3]], data).expect("batch shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_at(path))?;
        let mut w = BufWriter::new(file);
        let mut header = Vec::new();
        header.extend_from_slice(DATASET_MAGIC);
        for v in [self.len(), self.classes, self.part_size, self.parts()] {
            header.extend_from_slice(&(v as u64).to_le_bytes());
        }
        w.write_all(&header).map_err(io_at(path))?;
        self.images.write_to(&mut w, DType::F32)?;
        let mut tail = Vec::new();
        for (label, pos) in self.labels.iter().zip(&self.part_positions) {
            tail.extend_from_slice(&(*label as u64).to_le_bytes());
            for &(r, c) in pos {
                tail.extend_from_slice(&r.to_le_bytes());
                tail.extend_from_slice(&c.to_le_bytes());
            }
        }
        w.write_all(&tail).map_err(io_at(path))?;
        w.flush().map_err(io_at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_at(path))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(io_at(path))?;
        if &magic != DATASET_MAGIC {
            return Err(HarnessError::Invalid(format!("{}: not a parts dataset", path.display())));
        }
        let read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io_at(path))?;
            Ok(u64::from_le_bytes(b))
        };
        let n = read_u64(&mut r)? as usize;
        let classes = read_u64(&mut r)? as usize;
        let part_size = read_u64(&mut r)? as usize;
        let parts = read_u64(&mut r)? as usize;
        let images = Tensor::read_from(&mut r)?;
        if images.rank() != 4 || images.shape()[0] != n {
            return Err(HarnessError::Invalid(format!("{}: image tensor does not hold {n} images", path.display())));
        }
        let mut labels = Vec::with_capacity(n);
        let mut part_positions = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(read_u64(&mut r)? as usize);
            let mut pos = Vec::with_capacity(parts);
            for _ in 0..parts {
                let row = f64::from_bits(read_u64(&mut r)?);
                let col = f64::from_bits(read_u64(&mut r)?);
                pos.push((row, col));
            }
            part_positions.push(pos);
        }
        if labels.iter().any(|&l| l >= classes) {
            return Err(HarnessError::Invalid(format!("{}: label out of range", path.display())));
        }
        Ok(Self {
            images,
            labels,
            part_positions,
            classes,
            part_size,
        })
    }
}

/// Base color of part `g`.
fn part_color(g: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [1.0, -0.5, -0.5],
        [-0.5, 1.0, -0.5],
        [-0.5, -0.5, 1.0],
        [1.0, 1.0, -0.5],
        [1.0, -0.5, 1.0],
        [-0.5, 1.0, 1.0],
    ];
    let base = PALETTE[g % PALETTE.len()];
    let shade = 1.0 / (1 + g / PALETTE.len()) as f64;
    base.map(|v| v * shade)
}

/// Texture of part `g` at offset `(i, j)` inside the part: values in {0.4, 1}.
fn part_pattern(g: usize, i: usize, j: usize) -> f64 {
    let on = match g % 4 {
        0 => i % 2 == 0,
        1 => j % 2 == 0,
        2 => (i + j) % 2 == 0,
        _ => (i / 2 + j / 2) % 2 == 0,
    };
    if on {
        1.0
    } else {
        0.4
    }
}

fn split_seeds(seed: u64, split: Split) -> (u64, u64) {
    let mut root = Rng::new(seed);
    let mut streams = [(0, 0); 2];
    for s in &mut streams {
        *s = (root.next_u64(), root.next_u64());
    }
    streams[split as usize]
}

/// The train or test split for `cfg`.
pub fn generate_parts_dataset(cfg: &DataConfig, split: Split) -> Result<PartsDataset> {
    let (layout, texture) = split_seeds(cfg.seed, split);
    let count = match split {
        Split::Train => cfg.train,
        Split::Test => cfg.test,
    };
    generate_with_seeds(cfg, count, layout, texture)
}

/// `count` images; labels and part positions depend only on `layout_seed`.
pub fn generate_with_seeds(cfg: &DataConfig, count: usize, layout_seed: u64, texture_seed: u64) -> Result<PartsDataset> {
    cfg.validate()?;
    if count == 0 {
        return Err(invalid("data: sample count must be positive"));
    }
    let (size, p) = (cfg.size, cfg.part_size);
    let n = cfg.grid();
    let cell = size / n;
    let mut layout = Rng::new(layout_seed);
    let mut texture = Rng::new(texture_seed);

    let mut labels: Vec<usize> = (0..count).map(|i| i % cfg.classes).collect();
    layout.shuffle(&mut labels);

    let plane = size * size;
    let mut data = vec![0.0; count * 3 * plane];
    let mut part_positions = Vec::with_capacity(count);
    for (b, &label) in labels.iter().enumerate() {
        let mut boxes = Vec::with_capacity(cfg.parts);
        for g in 0..cfg.parts {
            let slot = (g + label) % (n * n);
            let (cell_r, cell_c) = ((slot / n) * cell, (slot % n) * cell);
            let free = (cell - p) as i64;
            let mut place = |origin: usize| -> usize {
                let centered = free / 2;
                let j = cfg.jitter as i64;
                let offset = (centered + layout.range_inclusive(-j, j)).clamp(0, free);
                origin + offset as usize
            };
            let top = place(cell_r);
            let left = place(cell_c);
            boxes.push((top, left));
        }
        for (a, &(ta, la)) in boxes.iter().enumerate() {
            for &(tb, lb) in &boxes[a + 1..] {
                if ta < tb + p && tb < ta + p && la < lb + p && lb < la + p {
                    return Err(HarnessError::Invalid(format!("data: parts overlap in image {b}")));
                }
            }
        }

        let img = &mut data[b * 3 * plane..(b + 1) * 3 * plane];
        for v in img.iter_mut() {
            *v = cfg.noise * texture.normal();
        }
        for (g, &(top, left)) in boxes.iter().enumerate() {
            let color = part_color(g);
            for i in 0..p {
                for j in 0..p {
                    let t = part_pattern(g, i, j);
                    for (ch, c) in color.iter().enumerate() {
                        img[ch * plane + (top + i) * size + left + j] += c * t;
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v = *v as f32 as f64;
        }
        let half = p as f64 / 2.0;
        part_positions.push(boxes.iter().map(|&(t, l)| (t as f64 + half, l as f64 + half)).collect());
    }
    Ok(PartsDataset {
        images: Tensor::new(vec![count, 3, size, size], data)?,
        labels,
        part_positions,
        classes: cfg.classes,
        part_size: p,
    })
}
