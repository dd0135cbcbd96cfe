//! On-disk formats: tensor files, dataset directories and checkpoints.
//!
//! A tensor file is the ASCII magic `TNS1`, the rank as a little-endian
//! `u32`, one little-endian `u32` per dimension, then the values as
//! little-endian IEEE-754 binary32 in row-major order. Values are held as
//! `f64` in memory and rounded to nearest-even on write.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::params::ParamStore;
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;
use crate::train::OptimState;

pub const TENSOR_MAGIC: &[u8; 4] = b"TNS1";
pub const MAX_RANK: usize = 4;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Input(format!("dimension {d} does not fit the tensor format")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Input(format!("value {v} overflows binary32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Parses a tensor file image; `path` only labels errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    let word = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| fail(offset, "file ends inside the header".into()))
    };
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        return Err(fail(0, "missing TNS1 magic".into()));
    }
    let rank = word(4)? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(fail(4, format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        let d = word(off)? as usize;
        if d == 0 {
            return Err(fail(off, "zero-sized dimension".into()));
        }
        shape.push(d);
    }
    let start = 8 + 4 * rank;
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| fail(8, "dimensions overflow".into()))?;
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(start))
        .ok_or_else(|| fail(8, "dimensions overflow".into()))?;
    if bytes.len() < expected {
        return Err(fail(
            bytes.len(),
            format!("payload truncated: expected {} bytes, found {}", expected - start, bytes.len() - start),
        ));
    }
    if bytes.len() > expected {
        return Err(fail(expected, format!("{} trailing bytes after payload", bytes.len() - expected)));
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in bytes[start..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fail(start + 4 * i, "non-finite value".into()));
        }
        data.push(v as f64);
    }
    Tensor::new(&shape, data)
}

pub fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?, path)
}

/// Rounds every value to the nearest binary32, as a save/load cycle would.
pub fn round_to_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

pub const IMAGES_FILE: &str = "images.tns";
pub const LABELS_FILE: &str = "labels.tns";

/// Reads `images.tns` (`[N, H, W, Ch]`, values in `[0, 1]`) and
/// `labels.tns` (`[N]`, whole numbers). With `classes`, labels must lie
/// below it.
pub fn read_dataset(dir: &Path, classes: Option<usize>) -> Result<Dataset> {
    let images_path = dir.join(IMAGES_FILE);
    let labels_path = dir.join(LABELS_FILE);
    let images = read_tensor(&images_path)?;
    let labels = read_tensor(&labels_path)?;
    let bad = |path: &PathBuf, message: String| Error::Format {
        path: path.clone(),
        offset: 0,
        message,
    };
    if images.rank() != 4 {
        return Err(bad(&images_path, format!("images must be rank 4, got {:?}", images.shape())));
    }
    if let Some(i) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Format {
            path: images_path,
            offset: (8 + 16 + 4 * i) as u64,
            message: "pixel value outside [0, 1]".into(),
        });
    }
    if labels.rank() != 1 || labels.shape()[0] != images.shape()[0] {
        return Err(bad(
            &labels_path,
            format!("labels {:?} do not match {} images", labels.shape(), images.shape()[0]),
        ));
    }
    let mut out = Vec::with_capacity(labels.len());
    for (i, &v) in labels.data().iter().enumerate() {
        let ok = v >= 0.0 && v.fract() == 0.0 && classes.is_none_or(|k| v < k as f64);
        if !ok {
            return Err(Error::Format {
                path: labels_path,
                offset: (12 + 4 * i) as u64,
                message: format!("label {v} is not a class index"),
            });
        }
        out.push(v as usize);
    }
    Dataset::new(images, out)
}

pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tensor(&data.images, &dir.join(IMAGES_FILE))?;
    let labels = Tensor::new(&[data.len()], data.labels.iter().map(|&l| l as f64).collect())?;
    write_tensor(&labels, &dir.join(LABELS_FILE))
}

pub const CHECKPOINT_FORMAT: &str = "sparse-mlp-checkpoint 1";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Everything needed to resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub optim: OptimState,
    pub rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
}

fn moment_files(name: &str) -> [String; 3] {
    [format!("{name}.tns"), format!("{name}.m.tns"), format!("{name}.v.tns")]
}

/// Writes `manifest.txt` plus one tensor file per parameter and per Adam
/// moment into `dir`.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let model_names: Vec<&str> = ckpt.model.params.names().collect();
    if model_names.iter().ne(ckpt.optim.names.iter()) {
        return Err(Error::Checkpoint("optimizer moments do not match the parameters".into()));
    }
    fs::create_dir_all(dir)?;
    let st = &ckpt.optim;
    let mut manifest = format!(
        "format = {CHECKPOINT_FORMAT}\nepoch = {}\nstep = {}\nrng = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\n[config]\n{}[params]\n",
        ckpt.epoch,
        st.step,
        ckpt.rng.state().encode(),
        st.beta1,
        st.beta2,
        st.eps,
        ckpt.config.serialize(),
    );
    for (i, (name, t)) in ckpt.model.params.iter().enumerate() {
        manifest.push_str(name);
        manifest.push('\n');
        let [p, m, v] = moment_files(name);
        write_tensor(t, &dir.join(p))?;
        write_tensor(&st.first[i], &dir.join(m))?;
        write_tensor(&st.second[i], &dir.join(v))?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

struct Manifest {
    header: Vec<(String, String)>,
    config: String,
    params: Vec<String>,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut section = 0;
    let mut m = Manifest {
        header: Vec::new(),
        config: String::new(),
        params: Vec::new(),
    };
    for line in text.lines() {
        match line {
            "[config]" if section == 0 => section = 1,
            "[params]" if section == 1 => section = 2,
            _ => match section {
                0 => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| Error::Checkpoint(format!("malformed manifest line `{line}`")))?;
                    m.header.push((k.trim().to_string(), v.trim().to_string()));
                }
                1 => {
                    m.config.push_str(line);
                    m.config.push('\n');
                }
                _ => {
                    if !line.is_empty() {
                        m.params.push(line.to_string());
                    }
                }
            },
        }
    }
    if section != 2 {
        return Err(Error::Checkpoint("manifest lacks [config] or [params] section".into()));
    }
    Ok(m)
}

fn header<'a>(m: &'a Manifest, key: &str) -> Result<&'a str> {
    m.header
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Checkpoint(format!("manifest is missing `{key}`")))
}

fn header_num<T: std::str::FromStr>(m: &Manifest, key: &str) -> Result<T> {
    let v = header(m, key)?;
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("manifest value `{v}` for `{key}` is invalid")))
}

/// Reads a checkpoint. Every file is read and checked against the config
/// before anything is returned.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let manifest = parse_manifest(&text)?;
    let format = header(&manifest, "format")?;
    if format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format `{format}`")));
    }
    let config = RunConfig::parse(&manifest.config)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let arch = Architecture::new(&config.model)?;
    let layout = arch.layout();
    if layout.len() != manifest.params.len() || layout.iter().zip(&manifest.params).any(|(s, n)| &s.name != n) {
        return Err(Error::Checkpoint(
            "parameter list in the manifest does not match the configured architecture".into(),
        ));
    }

    let mut params = ParamStore::new();
    let mut optim = OptimState::new(&ParamStore::new(), config.train.lr)?;
    for spec in &layout {
        let [p, m, v] = moment_files(&spec.name);
        let read = |file: &str| -> Result<Tensor> {
            let path = dir.join(file);
            if !path.exists() {
                return Err(Error::Checkpoint(format!("missing tensor file {}", path.display())));
            }
            let t = read_tensor(&path)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {:?}, expected {:?}",
                    path.display(),
                    t.shape(),
                    spec.shape
                )));
            }
            Ok(t)
        };
        params.insert(spec.name.clone(), read(&p)?)?;
        optim.names.push(spec.name.clone());
        optim.first.push(read(&m)?);
        optim.second.push(read(&v)?);
    }
    optim.step = header_num(&manifest, "step")?;
    optim.beta1 = header_num(&manifest, "beta1")?;
    optim.beta2 = header_num(&manifest, "beta2")?;
    optim.eps = header_num(&manifest, "eps")?;
    let rng = Rng::from_state(
        RngState::decode(header(&manifest, "rng")?).map_err(|e| Error::Checkpoint(format!("rng state: {e}")))?,
    );
    let epoch = header_num(&manifest, "epoch")?;
    Ok(Checkpoint {
        config,
        model: Model { arch, params },
        optim,
        rng,
        epoch,
    })
}

/// Applies the binary32 rounding of a save/load cycle in place, so an
/// uninterrupted run can be compared bitwise with a resumed one.
pub fn round_state_to_f32(params: &mut ParamStore, optim: &mut OptimState) {
    for (_, t) in params.iter_mut() {
        round_to_f32(t);
    }
    for t in optim.first.iter_mut().chain(optim.second.iter_mut()) {
        round_to_f32(t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthSpec;
    use crate::model::{build_model, model_forward};
    use crate::rng::Rng;
    use proptest::prelude::{prop, prop_assert_eq, proptest};

    #[test]
    fn scalar_file_layout() {
        let bytes = encode_tensor(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..4], b"TNS1");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..12], 1u32.to_le_bytes());
        assert_eq!(bytes[12..], 0x3F80_0000u32.to_le_bytes());
    }

    #[test]
    fn row_major_payload() {
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        let vals: Vec<f32> = bytes[16..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(vals, [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn format_errors_carry_offsets() {
        let p = Path::new("x.tns");
        let good = encode_tensor(&Tensor::new(&[2, 3], vec![0.5; 6]).unwrap()).unwrap();
        let offset = |bytes: &[u8]| match decode_tensor(bytes, p) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(offset(&bad), 0);
        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&5u32.to_le_bytes());
        assert_eq!(offset(&bad), 4);
        assert_eq!(offset(&good[..good.len() - 2]), (good.len() - 2) as u64);
        assert_eq!(offset(&good[..10]), 8);
        let mut long = good.clone();
        long.push(0);
        assert_eq!(offset(&long), good.len() as u64);
        let mut nan = good;
        nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(offset(&nan), 16);
    }

    #[test]
    fn rounds_to_nearest_even() {
        let x = 1.0 + f64::powi(2.0, -24);
        let t = Tensor::new(&[2], vec![x, 1.0 + 3.0 * f64::powi(2.0, -24)]).unwrap();
        let back = decode_tensor(&encode_tensor(&t).unwrap(), Path::new("t")).unwrap();
        assert_eq!(back.data(), [1.0, 1.0 + f64::powi(2.0, -22)]);
        assert!(encode_tensor(&Tensor::scalar(1e300)).is_err());
    }

    proptest! {
        #[test]
        fn binary32_values_round_trip(vals in prop::collection::vec(-1e30f32..1e30f32, 1..40)) {
            let t = Tensor::new(&[vals.len()], vals.iter().map(|&v| v as f64).collect()).unwrap();
            let bytes = encode_tensor(&t).unwrap();
            let back = decode_tensor(&bytes, Path::new("t")).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(encode_tensor(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn dataset_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let data = SynthSpec { samples: 6, ..Default::default() }.generate().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let back = read_dataset(dir.path(), Some(4)).unwrap();
        assert_eq!(back.labels, data.labels);
        assert!(back.images.max_abs_diff(&data.images) < 1e-7);
        assert!(read_dataset(dir.path(), Some(1)).is_err() || data.labels.iter().all(|&l| l == 0));

        write_tensor(&Tensor::new(&[5], vec![0.0; 5]).unwrap(), &dir.path().join(LABELS_FILE)).unwrap();
        assert!(matches!(read_dataset(dir.path(), None), Err(Error::Format { .. })));
        write_tensor(&Tensor::new(&[6], vec![0.5; 6]).unwrap(), &dir.path().join(LABELS_FILE)).unwrap();
        assert!(matches!(read_dataset(dir.path(), None), Err(Error::Format { offset: 12, .. })));
    }

    fn tiny_checkpoint() -> Checkpoint {
        let config = RunConfig::preset("tiny_test").unwrap();
        let model = build_model(&config.model, &mut Rng::new(1)).unwrap();
        let mut optim = OptimState::new(&model.params, config.train.lr).unwrap();
        optim.step = 7;
        for t in &mut optim.first {
            t.data_mut().iter_mut().for_each(|v| *v = 0.25);
        }
        Checkpoint {
            config,
            model,
            optim,
            rng: Rng::new(5),
            epoch: 3,
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ckpt = tiny_checkpoint();
        round_state_to_f32(&mut ckpt.model.params, &mut ckpt.optim);
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.optim, ckpt.optim);
        assert_eq!(back.rng.state(), ckpt.rng.state());
        let images = SynthSpec { samples: 3, ..Default::default() }.generate().unwrap().images;
        let (a, _) = model_forward(&ckpt.model, &images, &mut Rng::new(0), false).unwrap();
        let (b, _) = model_forward(&back.model, &images, &mut Rng::new(0), false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tampered_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &tiny_checkpoint()).unwrap();
        let manifest = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest).unwrap();

        fs::write(&manifest, text.replace("head.bias\n", "head.offset\n")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));

        fs::write(&manifest, text.replace("format = sparse-mlp-checkpoint 1", "format = 2")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));

        fs::write(&manifest, &text).unwrap();
        fs::remove_file(dir.path().join("head.bias.v.tns")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));

        write_tensor(&Tensor::zeros(&[3]).unwrap(), &dir.path().join("head.bias.v.tns")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}
