use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

/// One UTF-8 line per sentence.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for l in lines {
        if l.contains('\n') {
            return Err(Error::Format(format!("sentence contains a newline: {l:?}")));
        }
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(str::to_string).collect())
}

/// Source and target files aligned by line number.
pub fn write_parallel(src: &Path, tgt: &Path, pairs: &[(String, String)]) -> Result<()> {
    let (s, t): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
    write_lines(src, &s)?;
    write_lines(tgt, &t)
}

pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<(String, String)>> {
    let s = read_lines(src)?;
    let t = read_lines(tgt)?;
    if s.len() != t.len() {
        return Err(Error::Format(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    Ok(s.into_iter().zip(t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_round_trip_and_misalignment() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let pairs = vec![("x y".to_string(), "p".to_string()), ("z".into(), "q r".into())];
        write_parallel(&a, &b, &pairs).unwrap();
        assert_eq!(read_parallel(&a, &b).unwrap(), pairs);
        write_lines(&b, &["only".into()]).unwrap();
        assert!(read_parallel(&a, &b).is_err());
    }
}
