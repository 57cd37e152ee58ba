//! Binary PGM (P5, maxval 255) reading and writing. Chosen for image output
//! because it is trivially parseable everywhere with no codec dependency.

use std::path::Path;

use crate::CliError;

/// Write one grayscale image; `values` are in `[0, 1]`, row-major.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<(), CliError> {
    if values.len() != rows * cols {
        return Err(CliError::runtime(format!(
            "pgm write: {rows}x{cols} needs {} values, got {}",
            rows * cols,
            values.len()
        )));
    }
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for &v in values {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, bytes)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

/// Read a binary PGM into `[0, 1]` values with its (rows, cols).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>), CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let mut pos = 0usize;

    let mut token = |bytes: &[u8]| -> Result<String, CliError> {
        // Skip whitespace and `#` comment lines between header tokens.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CliError::usage(format!(
                "{}: truncated PGM header",
                path.display()
            )));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(&bytes)?;
    if magic != "P5" {
        return Err(CliError::usage(format!(
            "{}: expected P5 magic, got {magic:?}",
            path.display()
        )));
    }
    let cols: usize = token(&bytes)?
        .parse()
        .map_err(|_| CliError::usage(format!("{}: bad width", path.display())))?;
    let rows: usize = token(&bytes)?
        .parse()
        .map_err(|_| CliError::usage(format!("{}: bad height", path.display())))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| CliError::usage(format!("{}: bad maxval", path.display())))?;
    if maxval == 0 || maxval > 255 {
        return Err(CliError::usage(format!(
            "{}: only 8-bit PGM supported (maxval {maxval})",
            path.display()
        )));
    }
    pos += 1; // single whitespace byte after maxval
    let need = rows * cols;
    if bytes.len() < pos + need {
        return Err(CliError::usage(format!(
            "{}: truncated PGM payload",
            path.display()
        )));
    }
    let values = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Ok((rows, cols, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = std::env::temp_dir().join("jmvae_pgm");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.pgm");
        let values: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        write_pgm(&path, 3, 4, &values).unwrap();
        let (rows, cols, back) = read_pgm(&path).unwrap();
        assert_eq!((rows, cols), (3, 4));
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn pgm_rejects_wrong_magic() {
        let dir = std::env::temp_dir().join("jmvae_pgm");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.pgm");
        std::fs::write(&path, b"P2\n2 2\n255\n....").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}
