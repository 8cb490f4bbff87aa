//! Mode masks and attention coefficients as 8-bit PGM heatmaps.
//!
//! Each map is min-max scaled to `0..=255`. `maps.csv` records the range of
//! every file so values can be recovered to within `(max - min) / 510`.
//! `aggregate_mode<g>.csv` holds the mean coefficient map of mode `g` over
//! all exported images as a grid, and `aggregate_summary.csv` its argmax.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use stra_core::network::Model;
use stra_core::Tensor;

use crate::dataset::PartsDataset;
use crate::error::{invalid, io_at, HarnessError, Result};

/// Min-max quantization; a constant map becomes all zeros.
pub fn quantize(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let bytes = values
        .iter()
        .map(|&v| if span > 0.0 { ((v - min) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    (bytes, min, max)
}

pub fn dequantize(bytes: &[u8], min: f64, max: f64) -> Vec<f64> {
    bytes.iter().map(|&q| min + q as f64 / 255.0 * (max - min)).collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(io_at(path))
}

/// Binary PGM with maxval 255 and no comments, as written by [`write_pgm`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = fs::read(path).map_err(io_at(path))?;
    let bad = || HarnessError::Invalid(format!("{}: unsupported PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&raw[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P5" || num(&fields[3])? != 255 {
        return Err(bad());
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let pixels = raw.get(pos..pos + w * h).ok_or_else(bad)?.to_vec();
    Ok((w, h, pixels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub images: usize,
    pub modes: usize,
    pub pgm_files: usize,
    /// Mean coefficient map per mode, `(H, W)`.
    pub aggregate: Vec<Tensor>,
    /// `(row, col)` of each aggregate map's maximum, in feature cells.
    pub argmax: Vec<(usize, usize)>,
}

fn plane_argmax(t: &Tensor) -> (usize, usize) {
    let w = t.shape()[1];
    let i = t
        .data()
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    (i / w, i % w)
}

/// Masks `M^g` and coefficients `r_g` of mode block `block` for the images
/// in `data`. Heatmaps are written for the first `limit` images; the
/// aggregate covers all of them.
pub fn export_mode_maps(model: &Model, data: &PartsDataset, out: &Path, block: usize, limit: usize, batch: usize) -> Result<ExportSummary> {
    if model.mode_block_count() == 0 {
        return Err(invalid("export-modes: the model has no mode-attention block"));
    }
    if block >= model.mode_block_count() {
        return Err(invalid(format!(
            "export-modes: mode block {block} requested, the model has {}",
            model.mode_block_count()
        )));
    }
    fs::create_dir_all(out).map_err(io_at(out))?;
    let sidecar_path = out.join("maps.csv");
    let mut sidecar = BufWriter::new(File::create(&sidecar_path).map_err(io_at(&sidecar_path))?);
    writeln!(sidecar, "file,image,mode,kind,min,max").map_err(io_at(&sidecar_path))?;

    let indices: Vec<usize> = (0..data.len()).collect();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let (mut modes, mut h, mut w, mut pgm_files) = (0, 0, 0, 0);
    for chunk in indices.chunks(batch.max(1)) {
        let (x, _) = data.batch(chunk);
        let cache = model.forward(&x, false)?;
        let st = cache.mode_states()[block];
        let s = st.masks.shape();
        (modes, h, w) = (s[1], s[2], s[3]);
        let plane = h * w;
        if sums.is_empty() {
            sums = vec![vec![0.0; plane]; modes];
        }
        for (local, &image) in chunk.iter().enumerate() {
            for (g, sum) in sums.iter_mut().enumerate() {
                let at = (local * modes + g) * plane;
                let coef = &st.coefficients.data()[at..at + plane];
                for (acc, v) in sum.iter_mut().zip(coef) {
                    *acc += v;
                }
                if image >= limit {
                    continue;
                }
                for (kind, values) in [("mask", &st.masks.data()[at..at + plane]), ("coef", coef)] {
                    let name = format!("img{image:04}_mode{g}_{kind}.pgm");
                    let (bytes, min, max) = quantize(values);
                    write_pgm(&out.join(&name), w, h, &bytes)?;
                    writeln!(sidecar, "{name},{image},{g},{kind},{min},{max}").map_err(io_at(&sidecar_path))?;
                    pgm_files += 1;
                }
            }
        }
    }
    sidecar.flush().map_err(io_at(&sidecar_path))?;

    let n = data.len() as f64;
    let aggregate: Vec<Tensor> = sums
        .into_iter()
        .map(|s| Tensor::new(vec![h, w], s.into_iter().map(|v| v / n).collect()))
        .collect::<stra_core::Result<_>>()?;
    let argmax: Vec<(usize, usize)> = aggregate.iter().map(plane_argmax).collect();
    for (g, map) in aggregate.iter().enumerate() {
        let path = out.join(format!("aggregate_mode{g}.csv"));
        let mut text = String::new();
        for row in map.data().chunks(w) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        fs::write(&path, text).map_err(io_at(&path))?;
    }
    let path = out.join("aggregate_summary.csv");
    let mut text = String::from("mode,argmax_row,argmax_col,max\n");
    for (g, (map, (r, c))) in aggregate.iter().zip(&argmax).enumerate() {
        text.push_str(&format!("{g},{r},{c},{}\n", map.data()[r * w + c]));
    }
    fs::write(&path, text).map_err(io_at(&path))?;

    Ok(ExportSummary {
        images: data.len(),
        modes,
        pgm_files,
        aggregate,
        argmax,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::dataset::{generate_parts_dataset, DataConfig, Split};
    use stra_core::network::build_network;
    use stra_core::Rng;

    fn small_data() -> PartsDataset {
        let cfg = DataConfig {
            test: 6,
            ..DataConfig::default()
        };
        generate_parts_dataset(&cfg, Split::Test).unwrap()
    }

    fn model() -> Model {
        build_network(&RunConfig::default().arch, &mut Rng::new(2)).unwrap()
    }

    #[test]
    fn quantization_error_is_bounded() {
        let values: Vec<f64> = (0..300).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let (q, min, max) = quantize(&values);
        let back = dequantize(&q, min, max);
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() <= (max - min) / 510.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_round_trip_recovers_maps() {
        let dir = tempfile::tempdir().unwrap();
        let data = small_data();
        let m = model();
        let summary = export_mode_maps(&m, &data, dir.path(), 0, 2, 4).unwrap();
        assert_eq!(summary.pgm_files, 2 * 4 * 2);
        let cache = m.forward(&data.batch(&[1]).0, false).unwrap();
        let masks = &cache.mode_states()[0].masks;
        let sidecar = fs::read_to_string(dir.path().join("maps.csv")).unwrap();
        let line = sidecar.lines().find(|l| l.starts_with("img0001_mode2_mask.pgm")).unwrap();
        let f: Vec<&str> = line.split(',').collect();
        let (min, max): (f64, f64) = (f[4].parse().unwrap(), f[5].parse().unwrap());
        let (w, h, px) = read_pgm(&dir.path().join(f[0])).unwrap();
        assert_eq!((w, h), (16, 16));
        let stored = &masks.data()[2 * 256..3 * 256];
        for (a, b) in dequantize(&px, min, max).iter().zip(stored) {
            assert!((a - b).abs() <= (max - min) / 510.0 + 1e-15);
        }
        let agg = fs::read_to_string(dir.path().join("aggregate_mode0.csv")).unwrap();
        assert_eq!(agg.lines().count(), 16);
        assert_eq!(agg.lines().next().unwrap().split(',').count(), 16);
    }

    #[test]
    fn zero_mask_logits_give_uniform_heatmaps() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model();
        let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(m.params_mut()) {
            if name.contains("mask_conv") {
                *p = Tensor::zeros(p.shape().to_vec());
            }
        }
        export_mode_maps(&m, &small_data(), dir.path(), 0, 1, 8).unwrap();
        let sidecar = fs::read_to_string(dir.path().join("maps.csv")).unwrap();
        for line in sidecar.lines().filter(|l| l.contains(",mask,")) {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f[4].parse::<f64>().unwrap(), 1.0 / 256.0);
            assert_eq!(f[5].parse::<f64>().unwrap(), 1.0 / 256.0);
            let (_, _, px) = read_pgm(&dir.path().join(f[0])).unwrap();
            assert!(px.iter().all(|&q| q == 0));
        }
    }

    #[test]
    fn model_without_modes_rejected() {
        let mut cfg = RunConfig::default();
        cfg.arch.stages.truncate(1);
        let m = build_network(&cfg.arch, &mut Rng::new(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(export_mode_maps(&m, &small_data(), dir.path(), 0, 1, 8).is_err());
    }
}
