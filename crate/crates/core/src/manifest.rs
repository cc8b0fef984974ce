//! Dataset manifests: a plain-text index mapping sample ids to their
//! tensor files and acquisition metadata.
//!
//! One record per line, eight comma-separated fields:
//!
//! ```text
//! id,volunteer,site,side,location,pa_path,us_path,label_path
//! ```
//!
//! Paths are stored relative to the manifest's own directory, `#` lines
//! and blank lines are skipped, and no quoting exists, so ids and paths
//! must not contain commas. The manifest does not carry the wavelength
//! axis; callers pass it when loading.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::tensorfile::{read_tensor, TensorData};
use crate::types::{
    LabelMap, Sample, SampleId, SampleMeta, Side, Site, SpectralCube, UsImage, WavelengthAxis,
};

/// One manifest record: where a sample's tensors live and what was imaged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub id: SampleId,
    pub meta: SampleMeta,
    pub pa_path: PathBuf,
    pub us_path: PathBuf,
    pub label_path: PathBuf,
}

fn check_field(what: &'static str, s: &str) -> Result<()> {
    if s.is_empty() {
        return Err(CoreError::invalid(what, "empty"));
    }
    if s.contains(',') || s.contains('\n') || s.contains('\r') {
        return Err(CoreError::invalid(
            what,
            format!("'{s}' contains a comma or newline"),
        ));
    }
    Ok(())
}

fn path_field(what: &'static str, p: &Path) -> Result<String> {
    let s = p
        .to_str()
        .ok_or_else(|| CoreError::invalid(what, "path is not valid UTF-8"))?;
    check_field(what, s)?;
    if p.is_absolute() {
        return Err(CoreError::invalid(
            what,
            format!("'{s}' is absolute; manifest paths are relative to the manifest directory"),
        ));
    }
    Ok(s.to_owned())
}

/// Writes `refs` as a manifest at `path`.
pub fn write_manifest(path: &Path, refs: &[SampleRef]) -> Result<()> {
    let mut seen = HashSet::new();
    let mut out = String::new();
    for r in refs {
        check_field("sample id", &r.id)?;
        if !seen.insert(r.id.as_str()) {
            return Err(CoreError::invalid(
                "manifest",
                format!("duplicate sample id '{}'", r.id),
            ));
        }
        let pa = path_field("pa path", &r.pa_path)?;
        let us = path_field("us path", &r.us_path)?;
        let lb = path_field("label path", &r.label_path)?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.id, r.meta.volunteer_id, r.meta.site, r.meta.side, r.meta.location_index, pa, us, lb
        ));
    }
    fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

/// Parses the manifest at `path`. Errors name the offending line.
pub fn read_manifest(path: &Path) -> Result<Vec<SampleRef>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut refs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |reason: String| CoreError::Invalid {
            what: "manifest",
            reason: format!("{}:{lineno}: {reason}", path.display()),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(fail(format!("expected 8 fields, found {}", fields.len())));
        }
        let id = fields[0].to_owned();
        if id.is_empty() {
            return Err(fail("empty sample id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(fail(format!("duplicate sample id '{id}'")));
        }
        let volunteer: u32 = fields[1]
            .parse()
            .map_err(|_| fail(format!("bad volunteer id '{}'", fields[1])))?;
        let site = Site::parse(fields[2]).map_err(|e| fail(e.to_string()))?;
        let side = Side::parse(fields[3]).map_err(|e| fail(e.to_string()))?;
        let location: u8 = fields[4]
            .parse()
            .map_err(|_| fail(format!("bad location index '{}'", fields[4])))?;
        let meta = SampleMeta::new(volunteer, site, side, location).map_err(|e| fail(e.to_string()))?;
        for (name, f) in [("pa", fields[5]), ("us", fields[6]), ("label", fields[7])] {
            if f.is_empty() {
                return Err(fail(format!("empty {name} path")));
            }
        }
        refs.push(SampleRef {
            id,
            meta,
            pa_path: PathBuf::from(fields[5]),
            us_path: PathBuf::from(fields[6]),
            label_path: PathBuf::from(fields[7]),
        });
    }
    Ok(refs)
}

fn sample_err(id: &str, reason: impl std::fmt::Display) -> CoreError {
    CoreError::Sample {
        id: id.to_owned(),
        reason: reason.to_string(),
    }
}

/// Loads the three tensors referenced by `r`, resolving paths against
/// `base_dir` (the manifest's directory), and assembles a [`Sample`].
pub fn load_sample(base_dir: &Path, r: &SampleRef, axis: WavelengthAxis) -> Result<Sample> {
    let pa = match read_tensor(&base_dir.join(&r.pa_path)).map_err(|e| sample_err(&r.id, e))? {
        TensorData::F32(a) => a,
        other => {
            return Err(sample_err(
                &r.id,
                format!("pa tensor has dtype {}, expected f32", other.dtype_name()),
            ))
        }
    };
    let pa = pa
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| sample_err(&r.id, "pa tensor is not 3-dimensional"))?;
    let pa = SpectralCube::new(axis, pa).map_err(|e| sample_err(&r.id, e))?;

    let us = match read_tensor(&base_dir.join(&r.us_path)).map_err(|e| sample_err(&r.id, e))? {
        TensorData::F32(a) => a,
        other => {
            return Err(sample_err(
                &r.id,
                format!("us tensor has dtype {}, expected f32", other.dtype_name()),
            ))
        }
    };
    let us = us
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| sample_err(&r.id, "us tensor is not 2-dimensional"))?;
    let us = UsImage::new(us).map_err(|e| sample_err(&r.id, e))?;

    let labels =
        match read_tensor(&base_dir.join(&r.label_path)).map_err(|e| sample_err(&r.id, e))? {
            TensorData::U8(a) => a,
            other => {
                return Err(sample_err(
                    &r.id,
                    format!("label tensor has dtype {}, expected u8", other.dtype_name()),
                ))
            }
        };
    let labels = labels
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| sample_err(&r.id, "label tensor is not 2-dimensional"))?;
    let labels = LabelMap::new(labels).map_err(|e| sample_err(&r.id, e))?;

    Sample::new(r.id.clone(), pa, us, labels, r.meta)
}

/// Reads a manifest and loads every referenced sample.
pub fn load_all(manifest_path: &Path, axis: WavelengthAxis) -> Result<Vec<Sample>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let refs = read_manifest(manifest_path)?;
    refs.iter().map(|r| load_sample(base, r, axis)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorfile::write_tensor;
    use ndarray::{ArrayD, IxDyn};

    fn make_ref(id: &str, vol: u32) -> SampleRef {
        SampleRef {
            id: id.to_owned(),
            meta: SampleMeta::new(vol, Site::Forearm, Side::Left, 1).unwrap(),
            pa_path: PathBuf::from(format!("{id}_pa.patc")),
            us_path: PathBuf::from(format!("{id}_us.patc")),
            label_path: PathBuf::from(format!("{id}_label.patc")),
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        let refs = vec![make_ref("s000", 1), make_ref("s001", 2)];
        write_manifest(&path, &refs).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), refs);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        let cases = [
            ("s0,1,forearm,left,0,a,b\n", "expected 8 fields", 3),
            ("s0,x,forearm,left,0,a,b,c\n", "bad volunteer", 3),
            ("s0,1,shoulder,left,0,a,b,c\n", "unknown site", 3),
            ("s0,1,forearm,up,0,a,b,c\n", "unknown side", 3),
            ("s0,1,forearm,left,9,a,b,c\n", "location index", 3),
            ("s0,1,forearm,left,0,a,b,c\ns0,1,calf,right,1,d,e,f\n", "duplicate", 4),
            ("s0,1,forearm,left,0,,b,c\n", "empty pa path", 3),
        ];
        for (text, needle, line) in cases {
            std::fs::write(&path, format!("# header comment\n\n{text}")).unwrap();
            let err = read_manifest(&path).unwrap_err().to_string();
            assert!(
                err.contains(needle) && err.contains(&format!(":{line}")),
                "error '{err}' should mention '{needle}' on line {line}"
            );
        }
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        std::fs::write(
            &path,
            "# a comment\n\ns0,3,calf,right,2,pa.patc,us.patc,lb.patc\n\n",
        )
        .unwrap();
        let refs = read_manifest(&path).unwrap();
        assert_eq!(refs.len(), 1);
        assert_eq!(refs[0].meta.volunteer_id, 3);
        assert_eq!(refs[0].meta.site, Site::Calf);
    }

    #[test]
    fn write_rejects_absolute_paths_and_commas() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        let mut r = make_ref("s0", 1);
        r.pa_path = PathBuf::from("/abs/pa.patc");
        assert!(write_manifest(&path, &[r]).is_err());
        let mut r = make_ref("s0", 1);
        r.id = "a,b".into();
        assert!(write_manifest(&path, &[r]).is_err());
    }

    #[test]
    fn load_sample_reads_tensors_and_checks_them() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path();
        let axis = WavelengthAxis::new(3, 700.0, 900.0).unwrap();
        let r = make_ref("s7", 4);

        let pa = ArrayD::from_elem(IxDyn(&[3, 5, 6]), 0.25f32);
        let us = ArrayD::from_elem(IxDyn(&[5, 6]), 0.5f32);
        let labels = ArrayD::from_elem(IxDyn(&[5, 6]), 2u8);
        write_tensor(&base.join(&r.pa_path), &TensorData::F32(pa)).unwrap();
        write_tensor(&base.join(&r.us_path), &TensorData::F32(us)).unwrap();
        write_tensor(&base.join(&r.label_path), &TensorData::U8(labels)).unwrap();

        let sample = load_sample(base, &r, axis).unwrap();
        assert_eq!(sample.id, "s7");
        assert_eq!(sample.height(), 5);
        assert_eq!(sample.width(), 6);
        assert_eq!(sample.pa.channels(), 3);

        // Axis mismatch is a per-sample error naming the id.
        let wide_axis = WavelengthAxis::new(4, 700.0, 900.0).unwrap();
        let err = load_sample(base, &r, wide_axis).unwrap_err().to_string();
        assert!(err.contains("s7"), "error '{err}' should name the sample");
    }

    #[test]
    fn load_sample_rejects_wrong_dtype_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path();
        let axis = WavelengthAxis::new(2, 700.0, 800.0).unwrap();
        let r = make_ref("bad", 1);

        // Labels written as f32 instead of u8.
        let pa = ArrayD::from_elem(IxDyn(&[2, 4, 4]), 0.1f32);
        let us = ArrayD::from_elem(IxDyn(&[4, 4]), 0.1f32);
        let labels = ArrayD::from_elem(IxDyn(&[4, 4]), 0.0f32);
        write_tensor(&base.join(&r.pa_path), &TensorData::F32(pa)).unwrap();
        write_tensor(&base.join(&r.us_path), &TensorData::F32(us)).unwrap();
        write_tensor(&base.join(&r.label_path), &TensorData::F32(labels)).unwrap();
        let err = load_sample(base, &r, axis).unwrap_err().to_string();
        assert!(err.contains("expected u8"));
    }

    #[test]
    fn load_all_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path();
        let axis = WavelengthAxis::new(2, 700.0, 800.0).unwrap();
        let refs = vec![make_ref("a0", 1), make_ref("a1", 2)];
        for r in &refs {
            let pa = ArrayD::from_elem(IxDyn(&[2, 3, 3]), 1.0f32);
            let us = ArrayD::from_elem(IxDyn(&[3, 3]), 2.0f32);
            let labels = ArrayD::from_elem(IxDyn(&[3, 3]), 5u8);
            write_tensor(&base.join(&r.pa_path), &TensorData::F32(pa)).unwrap();
            write_tensor(&base.join(&r.us_path), &TensorData::F32(us)).unwrap();
            write_tensor(&base.join(&r.label_path), &TensorData::U8(labels)).unwrap();
        }
        let manifest = base.join("manifest.txt");
        write_manifest(&manifest, &refs).unwrap();
        let samples = load_all(&manifest, axis).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[1].id, "a1");
    }
}
