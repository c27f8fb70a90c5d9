//! Binary adapter checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   "SLRA"
//! version u32
//! count   u32
//! count × { site_id u32, d u32, m u32, r u32, alpha f64,
//!           A: d·r f64 row-major, B: r·m f64 row-major }
//! ```

use std::io::{Read, Write};

use super::{AdapterSet, LoraAdapter, SiteId};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLRA";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, set: &AdapterSet) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&to_u32(set.len())?.to_le_bytes())?;
    for ad in set.iter() {
        out.write_all(&ad.site_id().0.to_le_bytes())?;
        for dim in [ad.in_dim(), ad.out_dim(), ad.rank()] {
            out.write_all(&to_u32(dim)?.to_le_bytes())?;
        }
        out.write_all(&ad.alpha().to_le_bytes())?;
        for v in ad.a().data().iter().chain(ad.b().data()) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = [0u8; 8];
    (0..n)
        .map(|_| {
            r.read_exact(&mut buf).map_err(truncated)?;
            Ok(f64::from_le_bytes(buf))
        })
        .collect()
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("checkpoint truncated".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<AdapterSet> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut input)?;
    let mut adapters = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let site = SiteId(read_u32(&mut input)?);
        let d = read_u32(&mut input)? as usize;
        let m = read_u32(&mut input)? as usize;
        let r = read_u32(&mut input)? as usize;
        let alpha = read_f64s(&mut input, 1)?[0];
        let a = Matrix::new(d, r, read_f64s(&mut input, d * r)?)?;
        let b = Matrix::new(r, m, read_f64s(&mut input, r * m)?)?;
        adapters.push(LoraAdapter::from_parts(site, a, b, alpha)?);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last adapter".into()));
    }
    AdapterSet::new(adapters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::init_adapter;
    use crate::numerics::{gaussian_init, SeededRng};

    #[test]
    fn header_layout() {
        let mut rng = SeededRng::new(2);
        let ad = init_adapter(SiteId(7), 3, 2, 1, 1.0, 0.1, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &AdapterSet::new(vec![ad]).unwrap()).unwrap();
        assert_eq!(&buf[..4], b"SLRA");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &7u32.to_le_bytes());
        assert_eq!(&buf[16..20], &3u32.to_le_bytes());
        assert_eq!(&buf[20..24], &2u32.to_le_bytes());
        assert_eq!(&buf[24..28], &1u32.to_le_bytes());
        assert_eq!(&buf[28..36], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 36 + 8 * (3 + 2));
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let mut rng = SeededRng::new(3);
        let mk = |site, rng: &mut SeededRng| {
            let a = gaussian_init(4, 2, 1.0, rng).unwrap();
            let b = gaussian_init(2, 5, 1.0, rng).unwrap();
            LoraAdapter::from_parts(SiteId(site), a, b, 0.5).unwrap()
        };
        let set = AdapterSet::new(vec![mk(1, &mut rng), mk(9, &mut rng)]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &set).unwrap();
        assert!(read_checkpoint(buf.as_slice()).unwrap().bit_eq(&set));
    }

    #[test]
    fn rejects_corruption() {
        assert!(matches!(read_checkpoint(&b"XXXX"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &AdapterSet::empty()).unwrap();
        assert!(read_checkpoint(buf.as_slice()).unwrap().is_empty());
        buf.push(0);
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::Format(_))));
        let mut short = Vec::new();
        let mut rng = SeededRng::new(1);
        let ad = init_adapter(SiteId(0), 2, 2, 1, 1.0, 0.1, &mut rng).unwrap();
        write_checkpoint(&mut short, &AdapterSet::new(vec![ad]).unwrap()).unwrap();
        short.truncate(short.len() - 3);
        assert!(matches!(read_checkpoint(short.as_slice()), Err(Error::Format(_))));
    }
}
