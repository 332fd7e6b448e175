//! Binary checkpoint: `PXGR`, u16 version, u32 entry count, then per entry
//! name length (u32), name bytes, rank (u32), dims (u32 each) and f32 data,
//! all little-endian. The first entry `descriptor` holds the architecture
//! text as raw bytes with rank 1.

use std::io::{Read, Write};
use std::path::Path;

use super::{Descriptor, Network, Scalar};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PXGR";
pub const VERSION: u16 = 1;

pub fn write_to<T: Scalar>(net: &Network<T>, extra: &[(&str, Vec<f32>)], w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&((1 + net.specs.len() + extra.len()) as u32).to_le_bytes())?;
    let desc = net.desc.to_text().into_bytes();
    put_name(w, "descriptor")?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(desc.len() as u32).to_le_bytes())?;
    w.write_all(&desc)?;
    for spec in &net.specs {
        let data: Vec<f32> = net.params[spec.range()].iter().map(|v| v.f64() as f32).collect();
        put_entry(w, &spec.name, &spec.shape, &data)?;
    }
    for (name, data) in extra {
        put_entry(w, name, &[data.len()], data)?;
    }
    Ok(())
}

fn put_name(w: &mut impl Write, name: &str) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn put_entry(w: &mut impl Write, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    put_name(w, name)?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for d in shape {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// A loaded checkpoint: the network plus any extra named f32 vectors
/// (optimizer state, counters).
pub struct Loaded<T> {
    pub net: Network<T>,
    pub extra: Vec<(String, Vec<f32>)>,
}

pub fn read_from<T: Scalar>(r: &mut impl Read) -> Result<Loaded<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { b: &bytes, at: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    if cur.name()? != "descriptor" || cur.u32()? != 1 {
        return Err(Error::CorruptCheckpoint("missing descriptor".into()));
    }
    let dlen = cur.u32()? as usize;
    let text = std::str::from_utf8(cur.take(dlen)?).map_err(|_| Error::CorruptCheckpoint("descriptor utf8".into()))?;
    let desc = Descriptor::from_text(text)?;
    let mut net = Network::<T>::zeros(&desc)?;
    let mut extra = Vec::new();
    let mut seen = vec![false; net.specs.len()];
    for _ in 1..count {
        let name = cur.name()?;
        let rank = cur.u32()? as usize;
        if rank > 4 {
            return Err(Error::CorruptCheckpoint(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        match net.specs.iter().position(|s| s.name == name) {
            Some(i) => {
                if net.specs[i].shape != shape || seen[i] {
                    return Err(Error::CorruptCheckpoint(format!("{name}: shape {shape:?}")));
                }
                seen[i] = true;
                let r = net.specs[i].range();
                for (dst, v) in net.params[r].iter_mut().zip(&data) {
                    *dst = T::of(*v as f64);
                }
            }
            None => extra.push((name, data)),
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::CorruptCheckpoint(format!("missing {}", net.specs[i].name)));
    }
    if cur.at != bytes.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(Loaded { net, extra })
}

pub fn save<T: Scalar>(net: &Network<T>, extra: &[(&str, Vec<f32>)], path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write_to(net, extra, &mut f)?;
        f.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Loaded<T>> {
    let mut f = std::fs::File::open(path)?;
    read_from(&mut f)
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.b.len() {
            return Err(Error::CorruptCheckpoint("truncated".into()));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("name utf8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_params() {
        let net: Network<f32> = Network::init(&Descriptor::toy16(), 9, 0.5).unwrap();
        let mut buf = Vec::new();
        write_to(&net, &[("adam.step", vec![3.0])], &mut buf).unwrap();
        let back = read_from::<f32>(&mut buf.as_slice()).unwrap();
        assert_eq!(back.net.params, net.params);
        assert_eq!(back.extra, vec![("adam.step".to_string(), vec![3.0])]);
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let net: Network<f32> = Network::zeros(&Descriptor::toy16()).unwrap();
        let mut buf = Vec::new();
        write_to(&net, &[], &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_from::<f32>(&mut bad.as_slice()), Err(Error::CorruptCheckpoint(_))));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_from::<f32>(&mut bad.as_slice()), Err(Error::CorruptCheckpoint(_))));
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_from::<f32>(&mut buf.as_slice()), Err(Error::CorruptCheckpoint(_))));
    }
}
