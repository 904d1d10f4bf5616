//! Bit-exact file formats.
//!
//! Raw tensor file (`.ften`), little-endian throughout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FTEN"
//! 4       1     version = 1
//! 5       1     dtype: 0 = f32, 1 = f64
//! 6       1     ndim = 4
//! 7       4*4   dims N, C, H, W as u32
//! 23      -     payload, row-major (N, C, H, W), dtype-sized scalars
//! ```
//!
//! Checkpoint file (`.fckp`):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FCKP"
//! 4       1     version = 1
//! 5       4     scale as u32
//! 9       4     channels as u32
//! 13      4     pafb_per_stage as u32
//! 17      4     parsingnet_resblocks as u32
//! 21      1     toggles bitfield: 1 = msrb, 2 = ca, 4 = sa, 8 = pmb
//! 22      8     init seed as u64
//! 30      4     parameter count as u32
//! 34      -     parameters in store order, each:
//!                 u16 name length, name bytes (utf-8),
//!                 an embedded raw tensor record (as above)
//! ```
//!
//! PPM images are binary P6 with maxval 255; [0, 1] scalars quantize by
//! half-up rounding.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::networks::ModelConfig;
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Shape, Tensor};

const TENSOR_MAGIC: &[u8; 4] = b"FTEN";
const CKPT_MAGIC: &[u8; 4] = b"FCKP";

fn encode_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    let s = t.shape();
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(1);
    out.push(T::DTYPE);
    out.push(4);
    for dim in [s.n, s.c, s.h, s.w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.reserve(t.data().len() * T::BYTE_WIDTH);
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_tensor<T: Scalar>(cur: &mut Cursor<'_>) -> Result<Tensor<T>> {
    let path = cur.path;
    if cur.take(4)? != TENSOR_MAGIC {
        return Err(Error::format(path, "missing FTEN magic"));
    }
    let version = cur.u8()?;
    if version != 1 {
        return Err(Error::format(path, format!("unsupported tensor version {version}")));
    }
    let dtype = cur.u8()?;
    if dtype != T::DTYPE {
        return Err(Error::format(
            path,
            format!("dtype byte {dtype} does not match the requested scalar width"),
        ));
    }
    let ndim = cur.u8()?;
    if ndim != 4 {
        return Err(Error::format(path, format!("expected 4 dims, got {ndim}")));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = cur.u32()? as usize;
        if *d == 0 {
            return Err(Error::format(path, "zero dimension"));
        }
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let payload = cur.take(shape.numel() * T::BYTE_WIDTH)?;
    let data = payload.chunks_exact(T::BYTE_WIDTH).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut bytes = Vec::new();
    encode_tensor(t, &mut bytes);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    let t = decode_tensor(&mut cur)?;
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(t)
}

/// Write the first batch element as a binary P6 image, one byte per
/// channel, half-up rounding of [0, 1] scalars.
pub fn write_ppm<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let s = img.shape();
    if s.c != 3 {
        return Err(Error::contract(format!("PPM needs 3 channels, got {}", s.c)));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    let plane = s.h * s.w;
    for i in 0..plane {
        for c in 0..3 {
            let v = img.data()[c * plane + i].to_f64();
            let q = (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
            bytes.push(q);
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a binary P6 image with maxval 255 into a (1, 3, H, W) tensor with
/// values in [0, 1]. Comment lines are honored.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
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
            return Err(Error::format(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(Error::format(path, "not a binary P6 image"));
    }
    let w: usize =
        token(&bytes)?.parse().map_err(|_| Error::format(path, "bad width"))?;
    let h: usize =
        token(&bytes)?.parse().map_err(|_| Error::format(path, "bad height"))?;
    let maxval: usize =
        token(&bytes)?.parse().map_err(|_| Error::format(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    if pos + 3 * w * h > bytes.len() {
        return Err(Error::format(path, "truncated pixel data"));
    }
    let mut out = Tensor::zeros(Shape::new(1, 3, h, w));
    let plane = h * w;
    for i in 0..plane {
        for c in 0..3 {
            out.data_mut()[c * plane + i] = bytes[pos + i * 3 + c] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn toggles_byte(cfg: &ModelConfig) -> u8 {
    (cfg.use_msrb as u8)
        | (cfg.use_ca as u8) << 1
        | (cfg.use_sa as u8) << 2
        | (cfg.use_pmb as u8) << 3
}

/// Persist the model configuration and every parameter.
pub fn write_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    store: &ParameterStore<f32>,
) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.push(1);
    for v in [cfg.scale, cfg.channels, cfg.pafb_per_stage, cfg.parsingnet_resblocks] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    bytes.push(toggles_byte(cfg));
    bytes.extend_from_slice(&cfg.seed.to_le_bytes());
    bytes.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name);
        encode_tensor(&p.value, &mut bytes);
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Named parameter tensors as stored in a checkpoint, in store order.
pub type NamedParams = Vec<(String, Tensor<f32>)>;

/// Read a checkpoint back into its configuration and named parameters.
pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, NamedParams)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    if cur.take(4)? != CKPT_MAGIC {
        return Err(Error::format(path, "missing FCKP magic"));
    }
    let version = cur.u8()?;
    if version != 1 {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let scale = cur.u32()? as usize;
    let channels = cur.u32()? as usize;
    let pafb_per_stage = cur.u32()? as usize;
    let parsingnet_resblocks = cur.u32()? as usize;
    let toggles = cur.u8()?;
    let seed = cur.u64()?;
    let cfg = ModelConfig {
        scale,
        channels,
        pafb_per_stage,
        parsingnet_resblocks,
        use_msrb: toggles & 1 != 0,
        use_ca: toggles & 2 != 0,
        use_sa: toggles & 4 != 0,
        use_pmb: toggles & 8 != 0,
        seed,
    };
    let count = cur.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::format(path, "parameter name is not utf-8"))?;
        params.push((name, decode_tensor::<f32>(&mut cur)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after parameters"));
    }
    Ok((cfg, params))
}

/// Load checkpoint parameters into a store built from the same
/// configuration. Every stored parameter must exist with the same shape.
pub fn restore_store(
    store: &mut ParameterStore<f32>,
    params: NamedParams,
    path: &Path,
) -> Result<()> {
    for (name, value) in params {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
        if store.get(id).value.shape() != value.shape() {
            return Err(Error::format(
                path,
                format!(
                    "parameter {name} has shape {} but the model expects {}",
                    value.shape(),
                    store.get(id).value.shape()
                ),
            ));
        }
        store.get_mut(id).value = value;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("fishsr-fio-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn tensor_round_trip_is_bitwise_for_both_widths() {
        let mut rng = SplitMix64::new(1);
        let t32 = Tensor::<f32>::uniform(Shape::new(2, 3, 4, 5), -10.0, 10.0, &mut rng);
        let p = tmp("round32.ften");
        write_tensor(&p, &t32).unwrap();
        assert!(read_tensor::<f32>(&p).unwrap().bits_eq(&t32));

        let t64 = Tensor::<f64>::uniform(Shape::new(1, 1, 3, 3), -1.0, 1.0, &mut rng);
        let p = tmp("round64.ften");
        write_tensor(&p, &t64).unwrap();
        assert!(read_tensor::<f64>(&p).unwrap().bits_eq(&t64));

        // dtype mismatch is refused
        assert!(read_tensor::<f32>(&p).is_err());
    }

    #[test]
    fn tensor_read_rejects_corruption() {
        let t = Tensor::<f32>::filled(Shape::new(1, 1, 2, 2), 1.0);
        let p = tmp("corrupt.ften");
        write_tensor(&p, &t).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_tensor::<f32>(&p).is_err());
    }

    #[test]
    fn missing_file_error_names_path() {
        let err = read_tensor::<f32>(Path::new("/nonexistent/nowhere.ften")).unwrap_err();
        assert!(err.to_string().contains("nowhere.ften"));
    }

    #[test]
    fn ppm_round_trip_hits_quantized_values() {
        let mut rng = SplitMix64::new(2);
        let img = Tensor::<f32>::uniform(Shape::new(1, 3, 5, 7), 0.0, 1.0, &mut rng);
        let p = tmp("img.ppm");
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            let q = ((b * 255.0 + 0.5).floor() / 255.0).clamp(0.0, 1.0);
            assert!((a - q).abs() < 1e-6);
        }
    }

    #[test]
    fn ppm_header_with_comment_parses() {
        let p = tmp("comment.ppm");
        let mut bytes = b"P6\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        std::fs::write(&p, bytes).unwrap();
        let img = read_ppm(&p).unwrap();
        assert_eq!(img.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(img.at(0, 0, 0, 0), 1.0);
        assert_eq!(img.at(0, 1, 0, 1), 1.0);
    }

    #[test]
    fn checkpoint_round_trips_config_and_parameters() {
        use crate::networks::{build_model, ModelConfig};
        let mut cfg = ModelConfig::desk(4);
        cfg.channels = 8;
        cfg.seed = 11;
        cfg.use_sa = false;
        let (_, _, store) = build_model::<f32>(&cfg).unwrap();
        let p = tmp("model.fckp");
        write_checkpoint(&p, &cfg, &store).unwrap();
        let (cfg2, params) = read_checkpoint(&p).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(params.len(), store.len());

        let (_, _, mut fresh) = build_model::<f32>(&ModelConfig { seed: 999, ..cfg }).unwrap();
        assert_ne!(fresh.snapshot_bytes(""), store.snapshot_bytes(""));
        restore_store(&mut fresh, params, &p).unwrap();
        assert_eq!(fresh.snapshot_bytes(""), store.snapshot_bytes(""));
    }
}
