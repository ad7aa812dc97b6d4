//! Checkpoint format:
//!
//! ```text
//! LOOPX1\n
//! curve_knots <K>\n
//! luts <B>\n
//! lut_size <D>\n
//! params <count>\n
//! \n
//! <count little-endian f32 values in ModelParams field order>
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelDims, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"LOOPX1";

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams) -> Result<()> {
    let dims = params.dims();
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.push(b'\n');
    header.extend_from_slice(
        format!(
            "curve_knots {}\nluts {}\nlut_size {}\nparams {}\n\n",
            dims.curve_knots,
            dims.luts,
            dims.lut_size,
            params.values().len()
        )
        .as_bytes(),
    );
    w.write_all(&header)?;
    let mut body = Vec::with_capacity(params.values().len() * 4);
    for &v in params.values() {
        body.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&body)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 1 || &bytes[..MAGIC.len()] != MAGIC || bytes[MAGIC.len()] != b'\n'
    {
        return Err(bad("missing LOOPX1 magic"));
    }
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("unterminated header"))?;
    let header = std::str::from_utf8(&bytes[MAGIC.len() + 1..end + 1])
        .map_err(|_| bad("header is not UTF-8"))?;
    let (mut knots, mut luts, mut size, mut count) = (None, None, None, None);
    for line in header.lines() {
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
        let value: usize = value
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad value in header line {line:?}")))?;
        let slot = match key {
            "curve_knots" => &mut knots,
            "luts" => &mut luts,
            "lut_size" => &mut size,
            "params" => &mut count,
            other => return Err(bad(format!("unknown header key {other:?}"))),
        };
        if slot.replace(value).is_some() {
            return Err(bad(format!("duplicate header key {key:?}")));
        }
    }
    let dims = ModelDims {
        curve_knots: knots.ok_or_else(|| bad("missing curve_knots"))?,
        luts: luts.ok_or_else(|| bad("missing luts"))?,
        lut_size: size.ok_or_else(|| bad("missing lut_size"))?,
    };
    dims.validate()?;
    let count = count.ok_or_else(|| bad("missing params"))?;
    if count != dims.param_count() {
        return Err(bad(format!(
            "params {count} does not match dimensions ({} expected)",
            dims.param_count()
        )));
    }
    let body = &bytes[end + 2..];
    if body.len() != count * 4 {
        return Err(bad(format!(
            "body has {} bytes, expected {}",
            body.len(),
            count * 4
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ModelParams::from_values(dims, values).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let dims = ModelDims {
            curve_knots: 5,
            luts: 2,
            lut_size: 3,
        };
        let values: Vec<f64> = (0..dims.param_count())
            .map(|i| ((i * 37 % 101) as f32 / 7.0 - 3.0) as f64)
            .collect();
        let p = ModelParams::from_values(dims, values).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        assert!(buf.starts_with(b"LOOPX1\ncurve_knots 5\nluts 2\nlut_size 3\n"));
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn rejects_corruption() {
        let p = ModelParams::init_identity(ModelDims::default()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();

        let mut wrong_magic = buf.clone();
        wrong_magic[5] = b'2';
        assert!(matches!(read_checkpoint(&wrong_magic[..]), Err(Error::Checkpoint(_))));

        let truncated = &buf[..buf.len() - 4];
        assert!(matches!(read_checkpoint(truncated), Err(Error::Checkpoint(_))));

        let text = String::from_utf8_lossy(&buf[..40]).replace("luts 4", "luts 5");
        let mut edited = text.into_bytes();
        edited.extend_from_slice(&buf[40..]);
        assert!(matches!(read_checkpoint(&edited[..]), Err(Error::Checkpoint(_))));
    }
}
