use std::path::{Path, PathBuf};

use super::{ImageRecord, ResolutionTag};
use crate::error::{FtwaError, Result};

/// Outcome of scanning an image directory.
#[derive(Debug, Default)]
pub struct IngestReport {
    pub records: Vec<ImageRecord>,
    /// Files that were skipped, with the reason.
    pub rejected: Vec<(PathBuf, String)>,
}

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Parses `<person_id>_<camera_id>_<index>.<ext>`.
pub fn parse_file_name(name: &str) -> std::result::Result<(u32, u32, u32), String> {
    let (stem, ext) = name
        .rsplit_once('.')
        .ok_or_else(|| "missing extension".to_string())?;
    if !EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
        return Err(format!("unsupported extension .{ext}"));
    }
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() != 3 {
        return Err(format!(
            "expected <person>_<camera>_<index>, got {} fields",
            parts.len()
        ));
    }
    let field = |s: &str, what: &str| {
        s.parse::<u32>()
            .map_err(|_| format!("{what} '{s}' is not a non-negative integer"))
    };
    Ok((
        field(parts[0], "person id")?,
        field(parts[1], "camera id")?,
        field(parts[2], "index")?,
    ))
}

/// Loads every image in `root` (non-recursive, sorted by file name).
pub fn ingest_directory(root: &Path) -> Result<IngestReport> {
    let entries = std::fs::read_dir(root).map_err(|e| FtwaError::io(root, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();

    let mut report = IngestReport::default();
    for path in paths {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (person, camera, _) = match parse_file_name(&name) {
            Ok(ids) => ids,
            Err(reason) => {
                report.rejected.push((path, reason));
                continue;
            }
        };
        let img = match image::open(&path) {
            Ok(img) => img.to_rgb32f(),
            Err(e) => {
                report.rejected.push((path, e.to_string()));
                continue;
            }
        };
        let rec = ImageRecord::new(img, person, camera, ResolutionTag::RealHr)?.with_source(&path);
        report.records.push(rec);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_valid_names() {
        assert_eq!(parse_file_name("12_1_3.png"), Ok((12, 1, 3)));
        assert_eq!(parse_file_name("0_0_0.JPG"), Ok((0, 0, 0)));
    }

    #[test]
    fn rejects_bad_names() {
        assert!(parse_file_name("12_1.png").is_err());
        assert!(parse_file_name("a_1_3.png").is_err());
        assert!(parse_file_name("1_1_3.bmp").is_err());
        assert!(parse_file_name("noext").is_err());
    }

    #[test]
    fn directory_round_trip_with_report() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_pixel(8, 16, image::Rgb([10, 200, 30]));
        img.save(dir.path().join("3_1_0.png")).unwrap();
        img.save(dir.path().join("3_0_0.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        std::fs::write(dir.path().join("4_0_0.png"), "not a png").unwrap();
        let report = ingest_directory(dir.path()).unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.rejected.len(), 2);
        assert_eq!(report.records[0].camera_id, 0);
        assert_eq!(report.records[0].size(), (16, 8));
        assert!(report.records[1].source_path.is_some());
    }

    #[test]
    fn missing_directory_names_the_path() {
        let err = ingest_directory(Path::new("/no/such/dir")).unwrap_err();
        assert!(err.to_string().contains("/no/such/dir"));
    }
}
