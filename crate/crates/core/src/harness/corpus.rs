//! Batch degradation of a directory of clean WAVs into a pair manifest.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::eval::ManifestRow;
use crate::signal::degrade::white_noise;
use crate::signal::wav::SAMPLE_RATE;
use crate::signal::{degrade, read_wav, write_wav, DegradationSpec};

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Sorted `*.wav` files directly inside `dir`.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Degrades every clean file into `out_dir` and writes `manifest.csv` there.
/// Without a noise recording, file `i` gets white noise seeded by `seed + i`.
/// Clean paths are written absolute, degraded paths relative to the manifest.
pub fn run(spec: &DegradationSpec, clean_dir: &Path, out_dir: &Path, noise: Option<&[f64]>, seed: u64) -> Result<Vec<ManifestRow>> {
    spec.validate(SAMPLE_RATE)?;
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for (i, path) in list_wavs(clean_dir)?.into_iter().enumerate() {
        let clean = read_wav(&path)?;
        let generated;
        let noise = match noise {
            Some(n) => n,
            None => {
                generated = white_noise(clean.len(), seed.wrapping_add(i as u64));
                &generated
            }
        };
        let (degraded, _) = degrade(&clean, spec, Some(noise), SAMPLE_RATE)?;
        let name = path
            .file_name()
            .ok_or_else(|| Error::Invalid(format!("no file name in {}", path.display())))?;
        write_wav(&out_dir.join(name), &degraded)?;
        rows.push(ManifestRow {
            clean_path: std::fs::canonicalize(&path)?.to_string_lossy().into_owned(),
            degraded_path: name.to_string_lossy().into_owned(),
            kind: Some(spec.kind.as_str().to_string()),
            snr_db: spec.snr_db,
            cutoff_hz: spec.cutoff_hz,
        });
    }
    let mut w = csv::Writer::from_path(out_dir.join(MANIFEST_NAME))?;
    if rows.is_empty() {
        w.write_record(["clean_path", "degraded_path", "kind", "snr_db", "cutoff_hz"])?;
    }
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}
