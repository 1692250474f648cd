//! Cross-attention heatmap export: per generated token, the head-averaged
//! attention of the last cross-attention layer over the patch grid, written
//! as a PGM preview plus a raw CSV.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::AttentionRecord;
use crate::tensor::Tensor;

/// One token's attention over the patch grid (`grid` is `[side, side]`,
/// rows sum to 1 up to head averaging).
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub index: usize,
    pub word: String,
    pub grid: Tensor,
}

/// Pull per-token heatmaps out of a decode's attention record.
///
/// The caption was decoded left to right, so the attention row at position
/// `i` of the prefix (which holds the previous token) is the visual context
/// used to produce `words[i]`; the BOS row maps to the first word and BOS
/// itself gets no map. Heads of the final layer are averaged.
pub fn extract_heatmaps(
    attention: &AttentionRecord,
    words: &[String],
    grid_side: usize,
) -> Result<Vec<Heatmap>> {
    let last = attention
        .layers
        .last()
        .ok_or_else(|| Error::Contract("attention record has no cross-attention layers".into()))?;
    if last.is_empty() {
        return Err(Error::Contract("cross-attention layer recorded no heads".into()));
    }
    let (rows, patches) = last[0].dims2()?;
    if patches != grid_side * grid_side {
        return Err(Error::Shape(format!(
            "{patches} patches do not form a {grid_side}x{grid_side} grid"
        )));
    }
    if words.len() > rows {
        return Err(Error::Contract(format!(
            "{} words but only {rows} attention rows",
            words.len()
        )));
    }
    let scale = 1.0 / last.len() as f64;
    let mut maps = Vec::with_capacity(words.len());
    for (i, word) in words.iter().enumerate() {
        let mut grid = vec![0.0; patches];
        for head in last {
            for (g, &v) in grid.iter_mut().zip(&head.data[i * patches..(i + 1) * patches]) {
                *g += v * scale;
            }
        }
        maps.push(Heatmap {
            index: i,
            word: word.clone(),
            grid: Tensor::new(vec![grid_side, grid_side], grid)?,
        });
    }
    Ok(maps)
}

fn safe_word(word: &str) -> String {
    word.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Plain-text PGM (P2), min-max normalized to 0..255. A constant map
/// renders as all zeros.
fn to_pgm(grid: &Tensor) -> String {
    let (h, w) = (grid.shape[0], grid.shape[1]);
    let min = grid.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = grid.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in grid.data.chunks(w) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let level = if span > 0.0 {
                    ((v - min) / span * 255.0).round() as u32
                } else {
                    0
                };
                level.to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn to_csv(grid: &Tensor) -> String {
    let w = grid.shape[1];
    let mut out = String::new();
    for row in grid.data.chunks(w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Parse a heatmap CSV back into a grid (testing / downstream tooling).
pub fn read_heatmap_csv(path: &Path) -> Result<Tensor> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut height = 0usize;
    for line in text.lines().filter(|l| !l.is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Data(format!("{}: ragged rows", path.display())))
            }
            _ => {}
        }
        height += 1;
        data.extend(row);
    }
    Tensor::new(vec![height, width.unwrap_or(0)], data)
}

#[derive(Serialize)]
struct IndexEntry {
    index: usize,
    word: String,
    pgm: String,
    csv: String,
}

/// Write one `.pgm` + `.csv` pair per token plus an `index.json` directory.
pub fn write_heatmaps(dir: &Path, maps: &[Heatmap]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut index = Vec::with_capacity(maps.len());
    for m in maps {
        let stem = format!("{:03}_{}", m.index, safe_word(&m.word));
        let pgm = format!("{stem}.pgm");
        let csv = format!("{stem}.csv");
        let pgm_path = dir.join(&pgm);
        std::fs::write(&pgm_path, to_pgm(&m.grid))
            .map_err(|e| Error::io(pgm_path.display().to_string(), e))?;
        let csv_path = dir.join(&csv);
        std::fs::write(&csv_path, to_csv(&m.grid))
            .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
        index.push(IndexEntry {
            index: m.index,
            word: m.word.clone(),
            pgm,
            csv,
        });
    }
    let index_path = dir.join("index.json");
    let body = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::Data(format!("heatmap index serialization: {e}")))?;
    std::fs::write(&index_path, body + "\n")
        .map_err(|e| Error::io(index_path.display().to_string(), e))
}
