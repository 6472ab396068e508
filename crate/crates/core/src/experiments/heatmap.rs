use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

/// Writes `|W|` of a 2-D weight to `<stem>.csv` and `<stem>.pgm`.
///
/// The PGM is 8-bit binary (P5), one pixel per entry with rows as image
/// rows, scaled so the largest magnitude maps to 255.
pub fn export_heatmap(weight: &Tensor, stem: impl AsRef<Path>) -> Result<HeatmapFiles> {
    if weight.ndim() != 2 {
        return Err(Error::Config(format!("heatmap needs a 2-D weight, got shape {:?}", weight.shape())));
    }
    let stem = stem.as_ref();
    let files = HeatmapFiles { csv: stem.with_extension("csv"), pgm: stem.with_extension("pgm") };
    let magnitudes = weight.map(f64::abs);

    let mut csv = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    for row in magnitudes.data().chunks_exact(weight.shape()[1].max(1)) {
        csv.write_record(row.iter().map(f64::to_string)).map_err(|e| csv_error(&files.csv, e))?;
    }
    let csv = csv.into_inner().map_err(|e| Error::Internal(format!("csv buffer: {e}")))?;
    fs::write(&files.csv, csv).map_err(|e| Error::io(&files.csv, e))?;
    fs::write(&files.pgm, pgm_bytes(&magnitudes)).map_err(|e| Error::io(&files.pgm, e))?;
    Ok(files)
}

/// P5 graymap of a non-negative 2-D tensor.
pub fn pgm_bytes(magnitudes: &Tensor) -> Vec<u8> {
    let [rows, cols] = [magnitudes.shape()[0], magnitudes.shape()[1]];
    let max = magnitudes.data().iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(magnitudes.data().iter().map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 }));
    out
}

/// Mean `|W|` over the top-left quadrant divided by the mean over the
/// bottom-right quadrant. Odd dimensions put the middle row/column in the
/// bottom/right half. Infinite when the bottom-right quadrant is all zero.
pub fn quadrant_mass_ratio(weight: &Tensor) -> f64 {
    assert!(weight.ndim() == 2 && weight.shape()[0] >= 2 && weight.shape()[1] >= 2, "need a 2-D weight of at least 2x2");
    let [m, n] = [weight.shape()[0], weight.shape()[1]];
    let (hm, hn) = (m / 2, n / 2);
    let mean = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| {
        let count = (rows.len() * cols.len()) as f64;
        rows.flat_map(|i| cols.clone().map(move |j| (i, j))).map(|(i, j)| weight.at2(i, j).abs()).sum::<f64>() / count
    };
    mean(0..hm, 0..hn) / mean(hm..m, hn..n)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Internal(format!("csv: {other:?}")),
    }
}
