//! Number formatting and artifact persistence.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

/// Shortest-form decimal with 17 significant digits (like C's `%.17g`).
///
/// Parsing the result back yields the identical `f64`.
pub fn fmt17(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-4..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Writes `contents` to `path` through a temp file and rename.
///
/// Refuses to replace an existing file: artifacts are write-once.
pub fn write_artifact(path: &Path, contents: &[u8]) -> Result<()> {
    if path.exists() {
        return Err(Error::ArtifactExists(path.display().to_string()));
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist_noclobber(path).map_err(|e| {
        if e.error.kind() == std::io::ErrorKind::AlreadyExists {
            Error::ArtifactExists(path.display().to_string())
        } else {
            Error::Io(e.error)
        }
    })?;
    Ok(())
}

/// CSV with one row per sample.
pub fn samples_csv(batch: &crate::SampleBatch) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..batch.d()).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in batch.rows() {
        let cells: Vec<String> = row.iter().map(|v| fmt17(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formats_like_percent_17g() {
        assert_eq!(fmt17(0.0), "0");
        assert_eq!(fmt17(1.0), "1");
        assert_eq!(fmt17(0.1), "0.10000000000000001");
        assert_eq!(fmt17(-2.5), "-2.5");
        assert_eq!(fmt17(1e-4), "0.0001");
        assert_eq!(fmt17(4.035829765375676e-05), "4.0358297653756761e-5");
        assert_eq!(fmt17(1e20), "1e20");
        assert_eq!(fmt17(123456.0), "123456");
    }

    proptest! {
        #[test]
        fn fmt17_round_trips(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            let s = fmt17(x);
            prop_assert_eq!(s.parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn artifacts_are_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.csv");
        write_artifact(&p, b"one").unwrap();
        assert!(matches!(write_artifact(&p, b"two"), Err(Error::ArtifactExists(_))));
        assert_eq!(std::fs::read(&p).unwrap(), b"one");
    }
}
