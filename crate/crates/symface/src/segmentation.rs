//! Frozen part-mask supplier: an exact oracle for generated samples, plus a
//! process-based hook for external segmenters. Neither path ever touches a
//! gradient graph.

use std::path::PathBuf;
use std::process::Command;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::toyfaces::{read_label_png, write_rgb_png, PartMaskSet, Sample};

#[derive(Debug, Clone)]
pub enum Segmenter {
    /// Ground-truth parts of a generated sample.
    Oracle,
    /// External process: `<command> <input.png> <output.png>`; the output
    /// must be an 8-bit single-channel image in the fixed part palette.
    External { command: PathBuf },
}

impl Segmenter {
    pub fn segment(&self, sample: &Sample) -> Result<PartMaskSet> {
        match self {
            Segmenter::Oracle => Ok(sample.parts.clone()),
            Segmenter::External { .. } => self.segment_image(&sample.image),
        }
    }

    pub fn segment_image(&self, image: &Array3<f32>) -> Result<PartMaskSet> {
        match self {
            Segmenter::Oracle => Err(Error::Segmentation(
                "oracle mode needs a generated sample, not a bare image".into(),
            )),
            Segmenter::External { command } => {
                let dir = tempfile::Builder::new()
                    .prefix("symface-seg")
                    .tempdir()
                    .map_err(|e| Error::Segmentation(format!("tempdir: {e}")))?;
                let input = dir.path().join("input.png");
                let output = dir.path().join("output.png");
                write_rgb_png(&input, image)?;
                let status = Command::new(command)
                    .arg(&input)
                    .arg(&output)
                    .status()
                    .map_err(|e| {
                        Error::Segmentation(format!("spawn {}: {e}", command.display()))
                    })?;
                if !status.success() {
                    return Err(Error::Segmentation(format!(
                        "{} exited with {status}",
                        command.display()
                    )));
                }
                let labels = read_label_png(&output)?;
                if labels.dim() != (image.dim().0, image.dim().1) {
                    return Err(Error::Segmentation(format!(
                        "segmenter output {:?} does not match input {}x{}",
                        labels.dim(),
                        image.dim().0,
                        image.dim().1
                    )));
                }
                PartMaskSet::from_labels(labels)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyfaces::{generate_face, write_label_png};
    use std::io::Write;
    use std::os::unix::fs::PermissionsExt;

    fn script(dir: &std::path::Path, body: &str) -> PathBuf {
        let path = dir.join("segmenter.sh");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "#!/bin/sh").unwrap();
        writeln!(f, "{body}").unwrap();
        drop(f);
        let mut perms = std::fs::metadata(&path).unwrap().permissions();
        perms.set_mode(0o755);
        std::fs::set_permissions(&path, perms).unwrap();
        path
    }

    #[test]
    fn oracle_returns_exact_parts() {
        let s = generate_face(4, 64, 0.2).unwrap();
        let seg = Segmenter::Oracle;
        let parts = seg.segment(&s).unwrap();
        assert_eq!(parts.labels(), s.parts.labels());
    }

    #[test]
    fn external_roundtrips_a_valid_palette() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_face(4, 64, 0.0).unwrap();
        let fixture = dir.path().join("fixture.png");
        write_label_png(&fixture, s.parts.labels()).unwrap();
        let cmd = script(dir.path(), &format!("cp {} \"$2\"", fixture.display()));
        let seg = Segmenter::External { command: cmd };
        let parts = seg.segment(&s).unwrap();
        assert_eq!(parts.labels(), s.parts.labels());
    }

    #[test]
    fn external_bad_palette_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_face(4, 64, 0.0).unwrap();
        let fixture = dir.path().join("bad.png");
        write_label_png(&fixture, &ndarray::Array2::from_elem((64, 64), 9u8)).unwrap();
        let cmd = script(dir.path(), &format!("cp {} \"$2\"", fixture.display()));
        let seg = Segmenter::External { command: cmd };
        match seg.segment(&s) {
            Err(Error::Segmentation(msg)) => assert!(msg.contains('9'), "{msg}"),
            other => panic!("expected palette error, got {other:?}"),
        }
    }

    #[test]
    fn external_failure_exit_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_face(4, 64, 0.0).unwrap();
        let cmd = script(dir.path(), "exit 3");
        let seg = Segmenter::External { command: cmd };
        assert!(matches!(seg.segment(&s), Err(Error::Segmentation(_))));
    }

    #[test]
    fn segmenting_never_touches_trainable_parameters() {
        let gen = crate::generator::Generator::<f32>::new(
            crate::generator::SwinConfig::tiny(16),
            1,
        )
        .unwrap();
        let before = gen.params.digest();
        let s = generate_face(4, 64, 0.0).unwrap();
        let _ = Segmenter::Oracle.segment(&s).unwrap();
        assert_eq!(gen.params.digest(), before);
    }
}
