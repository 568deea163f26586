//! Binary (P5) PGM output for debug images of masks and attention maps.

use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// Write row-major 8-bit pixels as a binary PGM file.
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArg(format!(
            "PGM needs non-zero dimensions, got {width}x{height}"
        )));
    }
    if pixels.len() != width * height {
        return Err(Error::shape(
            "write_pgm",
            format!("{}x{} = {} pixels", width, height, width * height),
            format!("{} provided", pixels.len()),
        ));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}
