//! Named-tensor container.
//!
//! Layout: the magic line `ERGT1`, one header line per tensor
//! (`name dim0 dim1 ...`), an empty line, then every tensor's values as
//! little-endian `f64` in header order.

use std::io::{BufRead, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "ERGT1\n";

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC.as_bytes())?;
    for (name, t) in tensors {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        let mut line = (*name).to_string();
        for d in t.shape() {
            line.push(' ');
            line.push_str(&d.to_string());
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.write_all(b"\n")?;
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing ERGT1 magic".into()));
    }
    let mut headers = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Checkpoint("unterminated header".into()));
        }
        let l = line.strip_suffix('\n').unwrap_or(&line);
        if l.is_empty() {
            break;
        }
        let mut parts = l.split(' ');
        let name = parts.next().unwrap_or_default().to_string();
        let shape = parts
            .map(|p| p.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::Checkpoint(format!("bad shape for {name}: {e}")))?;
        headers.push((name, shape));
    }
    let mut out = Vec::with_capacity(headers.len());
    let mut buf = [0u8; 8];
    for (name, shape) in headers {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated payload for {name}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(out)
}
