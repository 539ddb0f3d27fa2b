//! Heatmap export as binary PGM (`P5`, 8-bit).

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes an `[H,W]` map in `[0,1]` as `P5` with pixel `round(255·v)`.
/// Values outside the unit range are clamped.
pub fn write_pgm(map: &Tensor, mut w: impl Write) -> Result<()> {
    if map.ndim() != 2 {
        return Err(Error::Shape(format!("PGM export needs an [H,W] map, got {:?}", map.shape())));
    }
    let (h, wd) = (map.shape()[0], map.shape()[1]);
    write!(w, "P5\n{wd} {h}\n255\n")?;
    let bytes: Vec<u8> = map.data().iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a `P5` file written by [`write_pgm`] back into `[0,1]` values.
pub fn read_pgm(r: impl Read) -> Result<Tensor> {
    let mut r = std::io::BufReader::new(r);
    let mut header = Vec::new();
    for _ in 0..3 {
        let mut line = String::new();
        r.read_line(&mut line)?;
        header.push(line.trim().to_string());
    }
    if header[0] != "P5" || header[2] != "255" {
        return Err(Error::Format("not an 8-bit P5 file".into()));
    }
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Format(format!("bad PGM size {:?}", header[1]))))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(Error::Format(format!("bad PGM size {:?}", header[1])));
    }
    let mut bytes = vec![0u8; dims[0] * dims[1]];
    r.read_exact(&mut bytes)?;
    Tensor::new([dims[1], dims[0]], bytes.into_iter().map(|b| b as f64 / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout_and_round_trip() {
        let m = Tensor::new([2, 3], vec![0.0, 0.5, 1.0, 0.2, 1.7, -0.1]).unwrap();
        let mut buf = Vec::new();
        write_pgm(&m, &mut buf).unwrap();
        assert_eq!(&buf[..11], b"P5\n3 2\n255\n");
        assert_eq!(&buf[11..], &[0, 128, 255, 51, 255, 0]);
        let back = read_pgm(buf.as_slice()).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back.data()[2], 1.0);
        assert!(write_pgm(&Tensor::zeros([1, 2, 2]), Vec::new()).is_err());
    }
}
