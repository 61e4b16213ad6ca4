//! Filesystem side of the data pipeline: reading/writing PGM images and
//! assembling visible/infrared pairs from a dataset directory.
//!
//! A dataset root holds two subdirectories, `vis/` and `ir/`, each with
//! `*.pgm` files; images pair up by file stem. Unpaired files are skipped
//! with a warning, mismatched shapes are errors, and an empty intersection
//! is an error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use revfuse_core::scalar::Scalar;
use revfuse_core::synth::ImagePair;
use revfuse_core::{pgm, Tensor};

use crate::error::{io_err, CliError, CliResult};

/// Reads one PGM file into a `[1,1,H,W]` tensor with values in `[0,1]`.
pub fn read_pgm<T: Scalar>(path: &Path) -> CliResult<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, "read", e))?;
    pgm::decode(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Writes one image as an 8-bit PGM. Returns how many samples had to be
/// clamped into range during quantization.
pub fn write_pgm<T: Scalar>(path: &Path, img: &Tensor<T>) -> CliResult<usize> {
    let encoded =
        pgm::encode(img, 255).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    std::fs::write(path, &encoded.bytes).map_err(|e| io_err(path, "write", e))?;
    Ok(encoded.clamped)
}

/// Maps file stem -> path for every `*.pgm` directly inside `dir`.
fn pgm_stems(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, "read directory", e))?;
    let mut map = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_err(dir, "read directory", e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
            continue;
        }
        match path.file_stem().and_then(|s| s.to_str()) {
            Some(stem) => {
                map.insert(stem.to_string(), path);
            }
            None => eprintln!(
                "warning: skipping {} (file name is not valid UTF-8)",
                path.display()
            ),
        }
    }
    Ok(map)
}

/// Loads every visible/infrared pair under `root`, sorted by name.
pub fn load_pairs<T: Scalar>(root: &Path) -> CliResult<Vec<ImagePair<T>>> {
    let vis = pgm_stems(&root.join("vis"))?;
    let ir = pgm_stems(&root.join("ir"))?;
    let mut pairs = Vec::new();
    for (stem, vis_path) in &vis {
        let Some(ir_path) = ir.get(stem) else {
            eprintln!(
                "warning: {} has no infrared counterpart, skipping",
                vis_path.display()
            );
            continue;
        };
        let v = read_pgm::<T>(vis_path)?;
        let i = read_pgm::<T>(ir_path)?;
        let pair = ImagePair::new(stem, v, i).map_err(|e| {
            CliError::data(format!(
                "pair {stem:?}: {e} (visible {}, infrared {})",
                vis_path.display(),
                ir_path.display()
            ))
        })?;
        pairs.push(pair);
    }
    for (stem, ir_path) in &ir {
        if !vis.contains_key(stem) {
            eprintln!(
                "warning: {} has no visible counterpart, skipping",
                ir_path.display()
            );
        }
    }
    if pairs.is_empty() {
        return Err(CliError::data(format!(
            "no image pairs under {} (expected vis/*.pgm files with matching ir/*.pgm names)",
            root.display()
        )));
    }
    Ok(pairs)
}

/// Writes a set of pairs to disk in the layout `load_pairs` reads.
/// Used by synthetic-data flows and tests.
pub fn write_pairs<T: Scalar>(root: &Path, pairs: &[ImagePair<T>]) -> CliResult<()> {
    let vis_dir = root.join("vis");
    let ir_dir = root.join("ir");
    std::fs::create_dir_all(&vis_dir).map_err(|e| io_err(&vis_dir, "create", e))?;
    std::fs::create_dir_all(&ir_dir).map_err(|e| io_err(&ir_dir, "create", e))?;
    for pair in pairs {
        write_pgm(&vis_dir.join(format!("{}.pgm", pair.name)), &pair.vis)?;
        write_pgm(&ir_dir.join(format!("{}.pgm", pair.name)), &pair.ir)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use revfuse_core::synth::{synth_pairs, SynthKind};

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn pairs_roundtrip_through_directories() {
        let dir = tmp();
        let pairs = synth_pairs::<f32>(SynthKind::StepEdges, 16, 3, 9).unwrap();
        write_pairs(dir.path(), &pairs).unwrap();
        let back = load_pairs::<f32>(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        // sorted by name and equal after one quantization cycle
        for (orig, read) in pairs.iter().zip(&back) {
            assert_eq!(orig.name, read.name);
            let max = orig.vis.max_abs_diff(&read.vis).unwrap();
            assert!(max <= 0.5 / 255.0 + 1e-9, "quantization error {max}");
        }
    }

    #[test]
    fn unpaired_files_are_skipped() {
        let dir = tmp();
        let pairs = synth_pairs::<f32>(SynthKind::StepEdges, 16, 2, 9).unwrap();
        write_pairs(dir.path(), &pairs).unwrap();
        // an extra visible image without a counterpart
        write_pgm(
            &dir.path().join("vis").join("lonely.pgm"),
            &Tensor::<f32>::zeros(&[1, 1, 4, 4]),
        )
        .unwrap();
        let back = load_pairs::<f32>(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back.iter().all(|p| p.name != "lonely"));
    }

    #[test]
    fn shape_mismatch_names_both_files() {
        let dir = tmp();
        std::fs::create_dir_all(dir.path().join("vis")).unwrap();
        std::fs::create_dir_all(dir.path().join("ir")).unwrap();
        write_pgm(
            &dir.path().join("vis").join("a.pgm"),
            &Tensor::<f32>::zeros(&[1, 1, 8, 8]),
        )
        .unwrap();
        write_pgm(
            &dir.path().join("ir").join("a.pgm"),
            &Tensor::<f32>::zeros(&[1, 1, 8, 6]),
        )
        .unwrap();
        let err = load_pairs::<f32>(dir.path()).unwrap_err();
        assert!(err.message.contains("a.pgm"), "{}", err.message);
        assert_eq!(err.code, crate::error::EXIT_DATA);
    }

    #[test]
    fn empty_intersection_is_an_error() {
        let dir = tmp();
        std::fs::create_dir_all(dir.path().join("vis")).unwrap();
        std::fs::create_dir_all(dir.path().join("ir")).unwrap();
        let err = load_pairs::<f32>(dir.path()).unwrap_err();
        assert!(err.message.contains("no image pairs"));
        // and a missing directory is a data error naming the directory
        let err = load_pairs::<f32>(&dir.path().join("nowhere")).unwrap_err();
        assert!(err.message.contains("nowhere"));
    }
}
