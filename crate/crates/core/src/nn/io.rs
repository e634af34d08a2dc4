//! `PNCA-W1` parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PNCA-W1"                     7 bytes
//! hidden activation tag          u8   (0 identity, 1 relu, 2 tanh)
//! output activation tag          u8
//! layer count L                  u32
//! layer widths                   L × u32
//! value count N                  u64  (= Σ (dims[i]+1)·dims[i+1])
//! values                         N × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::nn::{Activation, MlpSpec, ParamVector};

pub const PARAMS_MAGIC: &[u8; 7] = b"PNCA-W1";

pub fn write_params<W: Write>(
    out: &mut W,
    spec: &MlpSpec,
    params: &ParamVector,
) -> std::io::Result<()> {
    assert_eq!(params.len(), spec.param_count(), "params do not match spec");
    out.write_all(PARAMS_MAGIC)?;
    out.write_u8(spec.hidden_activation().tag())?;
    out.write_u8(spec.output_activation().tag())?;
    out.write_u32::<LittleEndian>(spec.layer_dims().len() as u32)?;
    for &d in spec.layer_dims() {
        out.write_u32::<LittleEndian>(d as u32)?;
    }
    out.write_u64::<LittleEndian>(params.len() as u64)?;
    for &v in params.values().iter() {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Reads one parameter block. `origin` names the source in error messages.
pub fn read_params<R: Read>(input: &mut R, origin: &Path) -> Result<(MlpSpec, ParamVector)> {
    let fmt = |msg: String| Error::format(origin, msg);
    let truncated =
        |e: std::io::Error| Error::format(origin, format!("truncated parameter block: {e}"));

    let mut magic = [0u8; 7];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != PARAMS_MAGIC {
        return Err(fmt(format!(
            "bad magic {:?}, expected PNCA-W1",
            String::from_utf8_lossy(&magic)
        )));
    }
    let hidden = input.read_u8().map_err(truncated)?;
    let output = input.read_u8().map_err(truncated)?;
    let hidden = Activation::from_tag(hidden)
        .ok_or_else(|| fmt(format!("unknown activation tag {hidden}")))?;
    let output = Activation::from_tag(output)
        .ok_or_else(|| fmt(format!("unknown activation tag {output}")))?;
    let layers = input.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if layers > 4096 {
        return Err(fmt(format!("implausible layer count {layers}")));
    }
    let mut dims = Vec::with_capacity(layers);
    for _ in 0..layers {
        dims.push(input.read_u32::<LittleEndian>().map_err(truncated)? as usize);
    }
    let spec = MlpSpec::with_activations(dims, hidden, output).map_err(|e| fmt(e.to_string()))?;
    let count = input.read_u64::<LittleEndian>().map_err(truncated)? as usize;
    if count != spec.param_count() {
        return Err(fmt(format!(
            "value count {count} does not match widths {:?} ({} parameters)",
            spec.layer_dims(),
            spec.param_count()
        )));
    }
    let mut values = vec![0.0; count];
    input
        .read_f64_into::<LittleEndian>(&mut values)
        .map_err(truncated)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(fmt("non-finite parameter value".into()));
    }
    Ok((spec, ParamVector::from_vec(values)))
}

pub fn save_params(path: &Path, spec: &MlpSpec, params: &ParamVector) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + 8 * params.len());
    write_params(&mut buf, spec, params).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<(MlpSpec, ParamVector)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = std::io::Cursor::new(bytes);
    let out = read_params(&mut cursor, path)?;
    if (cursor.position() as usize) != cursor.get_ref().len() {
        return Err(Error::format(path, "trailing bytes after parameter block"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use crate::numcore::seeded_rng;
    use proptest::prelude::*;

    fn origin() -> &'static Path {
        Path::new("<mem>")
    }

    #[test]
    fn header_layout() {
        let spec = MlpSpec::new(vec![2, 1]).unwrap();
        let params = ParamVector::from_vec(vec![1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        write_params(&mut buf, &spec, &params).unwrap();
        assert_eq!(&buf[..7], b"PNCA-W1");
        assert_eq!(buf[7], 1);
        assert_eq!(buf[8], 0);
        assert_eq!(&buf[9..13], &2u32.to_le_bytes());
        assert_eq!(&buf[13..17], &2u32.to_le_bytes());
        assert_eq!(&buf[17..21], &1u32.to_le_bytes());
        assert_eq!(&buf[21..29], &3u64.to_le_bytes());
        assert_eq!(&buf[29..37], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 29 + 24);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let spec = MlpSpec::new(vec![3, 2]).unwrap();
        let p = init_params(&spec, &mut seeded_rng(0));
        let mut buf = Vec::new();
        write_params(&mut buf, &spec, &p).unwrap();
        let mut bad = buf.clone();
        bad[5] = b'X';
        assert!(matches!(
            read_params(&mut bad.as_slice(), origin()),
            Err(Error::Format { .. })
        ));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(
            read_params(&mut &cut[..], origin()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let spec = MlpSpec::new(vec![5, 4, 3]).unwrap();
        let p = init_params(&spec, &mut seeded_rng(9));
        save_params(&path, &spec, &p).unwrap();
        let (spec2, p2) = load_params(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(p, p2);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dims in proptest::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
            let spec = MlpSpec::new(dims).unwrap();
            let p = init_params(&spec, &mut seeded_rng(seed));
            let mut buf = Vec::new();
            write_params(&mut buf, &spec, &p).unwrap();
            let (spec2, p2) = read_params(&mut buf.as_slice(), origin()).unwrap();
            prop_assert_eq!(spec, spec2);
            prop_assert!(p.values().iter().zip(p2.values().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
