//! Checkpoint archive: a metadata text record plus one binary record per
//! parameter/buffer. Round-trips are bit-exact.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "DRN2CKPT"
//! format version   u32
//! metadata length  u64, then UTF-8 "key=value" lines
//! record count     u64
//! per record:
//!   kind           u8   (0 parameter, 1 model-dtype buffer, 2 f64 buffer)
//!   name length    u64, then UTF-8 name
//!   dtype tag      u8   (0 = f32, 1 = f64)
//!   rank           u32, then one u64 per extent
//!   data           numel * dtype-size bytes, little-endian values
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::CheckpointError;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

use super::{ConvKind, DiRecNetV2, ExtractorStage, HeadMode, ModelConfig};

const MAGIC: &[u8; 8] = b"DRN2CKPT";
const VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_F64_BUFFER: u8 = 2;

/// Training metadata carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub seed: u64,
    pub classes: Vec<String>,
    /// Per-channel preprocessing statistics of the training split.
    pub preproc_mean: [f64; 3],
    pub preproc_std: [f64; 3],
    pub preproc_fingerprint: String,
}

impl CheckpointMeta {
    pub fn fresh(seed: u64, classes: Vec<String>) -> Self {
        CheckpointMeta {
            epoch: 0,
            val_accuracy: 0.0,
            seed,
            classes,
            preproc_mean: [0.0; 3],
            preproc_std: [1.0; 3],
            preproc_fingerprint: String::new(),
        }
    }
}

fn encode_extractor(stages: &[ExtractorStage]) -> String {
    stages
        .iter()
        .map(|s| {
            s.convs
                .iter()
                .map(|c| match c {
                    ConvKind::Standard { kernel, out_channels } => format!("conv{}:{}", kernel, out_channels),
                    ConvKind::Depthwise => "dw".to_string(),
                    ConvKind::Pointwise { out_channels } => format!("pw:{}", out_channels),
                })
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("|")
}

fn decode_extractor(text: &str) -> Result<Vec<ExtractorStage>, CheckpointError> {
    let bad = |msg: &str| CheckpointError::Metadata(format!("extractor spec: {}", msg));
    text.split('|')
        .map(|stage| {
            let convs = stage
                .split(',')
                .map(|tok| {
                    if tok == "dw" {
                        Ok(ConvKind::Depthwise)
                    } else if let Some(out) = tok.strip_prefix("pw:") {
                        Ok(ConvKind::Pointwise {
                            out_channels: out.parse().map_err(|_| bad(tok))?,
                        })
                    } else if let Some(rest) = tok.strip_prefix("conv") {
                        let (k, out) = rest.split_once(':').ok_or_else(|| bad(tok))?;
                        Ok(ConvKind::Standard {
                            kernel: k.parse().map_err(|_| bad(tok))?,
                            out_channels: out.parse().map_err(|_| bad(tok))?,
                        })
                    } else {
                        Err(bad(tok))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ExtractorStage { convs })
        })
        .collect()
}

fn render_metadata<T: Scalar>(model: &DiRecNetV2<T>, meta: &CheckpointMeta) -> String {
    let cfg = model.config();
    let bn_init: Vec<&str> = model
        .bn_states()
        .iter()
        .map(|s| if s.initialized { "1" } else { "0" })
        .collect();
    let mut lines = Vec::new();
    let mut push = |k: &str, v: String| lines.push(format!("{}={}", k, v));
    push("format_version", VERSION.to_string());
    push("head_mode", cfg.head_mode.as_str().to_string());
    push("classes", meta.classes.join(";"));
    push("epoch", meta.epoch.to_string());
    push("val_accuracy", format!("{}", meta.val_accuracy));
    push("total_params", model.total_params().to_string());
    push("seed", meta.seed.to_string());
    push("input_height", cfg.input_height.to_string());
    push("input_width", cfg.input_width.to_string());
    push("input_channels", cfg.input_channels.to_string());
    push("embed_dim", cfg.embed_dim.to_string());
    push("num_heads", cfg.num_heads.to_string());
    push("num_encoder_blocks", cfg.num_encoder_blocks.to_string());
    push("num_classes", cfg.num_classes.to_string());
    push("mlp_dim", cfg.mlp_dim.to_string());
    push("dropout_embed", format!("{}", cfg.dropout_embed));
    push("dropout_head", format!("{}", cfg.dropout_head));
    push("dropout_block", format!("{}", cfg.dropout_block));
    push("layer_norm_eps", format!("{}", cfg.layer_norm_eps));
    push("batch_norm_eps", format!("{}", cfg.batch_norm_eps));
    push("batch_norm_momentum", format!("{}", cfg.batch_norm_momentum));
    push("extractor", encode_extractor(&cfg.extractor));
    push("bn_initialized", bn_init.join(","));
    push("preproc_fingerprint", meta.preproc_fingerprint.clone());
    lines.join("\n")
}

struct MetadataMap(HashMap<String, String>);

impl MetadataMap {
    fn parse(text: &str) -> Self {
        let mut map = HashMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.to_string(), v.to_string());
            }
        }
        MetadataMap(map)
    }

    fn get(&self, key: &str) -> Result<&str, CheckpointError> {
        self.0
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| CheckpointError::Metadata(format!("missing key '{}'", key)))
    }

    fn parse_as<F: std::str::FromStr>(&self, key: &str) -> Result<F, CheckpointError> {
        self.get(key)?
            .parse()
            .map_err(|_| CheckpointError::Metadata(format!("unparsable value for '{}'", key)))
    }
}

fn write_u32(out: &mut impl Write, v: u32) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn write_u64(out: &mut impl Write, v: u64) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn write_record<T: Scalar>(
    out: &mut impl Write,
    kind: u8,
    name: &str,
    dims: &[usize],
    data: &[T],
) -> std::io::Result<()> {
    out.write_all(&[kind])?;
    write_u64(out, name.len() as u64)?;
    out.write_all(name.as_bytes())?;
    out.write_all(&[T::DTYPE.tag()])?;
    write_u32(out, dims.len() as u32)?;
    for &d in dims {
        write_u64(out, d as u64)?;
    }
    let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.size_bytes());
    for &v in data {
        v.write_le(&mut bytes);
    }
    out.write_all(&bytes)
}

/// Write the model, its batch-norm running statistics, the preprocessing
/// statistics and training metadata. The file is written to a temporary
/// sibling and renamed into place.
pub fn save_checkpoint<T: Scalar>(
    model: &DiRecNetV2<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp)?;
        let mut out = BufWriter::new(file);
        out.write_all(MAGIC)?;
        write_u32(&mut out, VERSION)?;
        let metadata = render_metadata(model, meta);
        write_u64(&mut out, metadata.len() as u64)?;
        out.write_all(metadata.as_bytes())?;

        let bn_records = model.bn_states().len() * 2;
        let record_count = model.params().len() + bn_records + 2;
        write_u64(&mut out, record_count as u64)?;

        for p in model.params().iter() {
            write_record(&mut out, KIND_PARAM, &p.name, p.value.dims(), p.value.data())?;
        }
        for (i, state) in model.bn_states().iter().enumerate() {
            write_record(
                &mut out,
                KIND_BUFFER,
                &format!("bn.stage{}.running_mean", i + 1),
                &[state.running_mean.len()],
                &state.running_mean,
            )?;
            write_record(
                &mut out,
                KIND_BUFFER,
                &format!("bn.stage{}.running_var", i + 1),
                &[state.running_var.len()],
                &state.running_var,
            )?;
        }
        write_record(&mut out, KIND_F64_BUFFER, "preproc.mean", &[3], &meta.preproc_mean)?;
        write_record(&mut out, KIND_F64_BUFFER, "preproc.std", &[3], &meta.preproc_std)?;
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| CheckpointError::Truncated(what.to_string()))?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let len = self.u64(what)? as usize;
        let bytes = self.bytes(len, what)?;
        String::from_utf8(bytes).map_err(|_| CheckpointError::Metadata(format!("{}: not UTF-8", what)))
    }
}

enum RecordData<T: Scalar> {
    Model(Vec<T>),
    F64(Vec<f64>),
}

struct Record<T: Scalar> {
    kind: u8,
    name: String,
    dims: Vec<usize>,
    data: RecordData<T>,
}

fn read_record<T: Scalar, R: Read>(r: &mut Reader<R>) -> Result<Record<T>, CheckpointError> {
    let kind = r.u8("record kind")?;
    let name = r.string("record name")?;
    let dtype_tag = r.u8("record dtype")?;
    let dtype = Dtype::from_tag(dtype_tag)
        .ok_or_else(|| CheckpointError::Metadata(format!("record '{}': unknown dtype tag", name)))?;
    let rank = r.u32("record rank")? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u64("record dims")? as usize);
    }
    let numel: usize = dims.iter().product();
    let raw = r.bytes(numel * dtype.size_bytes(), &format!("record '{}' data", name))?;
    let data = match kind {
        KIND_F64_BUFFER => {
            if dtype != Dtype::F64 {
                return Err(CheckpointError::DtypeMismatch {
                    stored: format!("{:?}", dtype),
                    expected: "F64".into(),
                });
            }
            RecordData::F64(raw.chunks(8).map(f64::read_le).collect())
        }
        _ => {
            if dtype != T::DTYPE {
                return Err(CheckpointError::DtypeMismatch {
                    stored: format!("{:?}", dtype),
                    expected: format!("{:?}", T::DTYPE),
                });
            }
            RecordData::Model(raw.chunks(T::DTYPE.size_bytes()).map(T::read_le).collect())
        }
    };
    Ok(Record { kind, name, dims, data })
}

/// Read a checkpoint back into a model plus its training metadata.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(DiRecNetV2<T>, CheckpointMeta), CheckpointError> {
    let file = File::open(path)?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };
    if r.bytes(8, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let metadata = MetadataMap::parse(&r.string("metadata")?);

    let head_mode = HeadMode::parse(metadata.get("head_mode")?)
        .ok_or_else(|| CheckpointError::Metadata("bad head_mode".into()))?;
    let config = ModelConfig {
        input_height: metadata.parse_as("input_height")?,
        input_width: metadata.parse_as("input_width")?,
        input_channels: metadata.parse_as("input_channels")?,
        embed_dim: metadata.parse_as("embed_dim")?,
        num_heads: metadata.parse_as("num_heads")?,
        num_encoder_blocks: metadata.parse_as("num_encoder_blocks")?,
        num_classes: metadata.parse_as("num_classes")?,
        mlp_dim: metadata.parse_as("mlp_dim")?,
        head_mode,
        dropout_embed: metadata.parse_as("dropout_embed")?,
        dropout_head: metadata.parse_as("dropout_head")?,
        dropout_block: metadata.parse_as("dropout_block")?,
        layer_norm_eps: metadata.parse_as("layer_norm_eps")?,
        batch_norm_eps: metadata.parse_as("batch_norm_eps")?,
        batch_norm_momentum: metadata.parse_as("batch_norm_momentum")?,
        extractor: decode_extractor(metadata.get("extractor")?)?,
    };
    let seed: u64 = metadata.parse_as("seed")?;
    let mut model = DiRecNetV2::<T>::build(config, seed)
        .map_err(|e| CheckpointError::Metadata(format!("config rejected: {}", e)))?;

    let mut meta = CheckpointMeta {
        epoch: metadata.parse_as("epoch")?,
        val_accuracy: metadata.parse_as("val_accuracy")?,
        seed,
        classes: metadata
            .get("classes")?
            .split(';')
            .map(str::to_string)
            .collect(),
        preproc_mean: [0.0; 3],
        preproc_std: [1.0; 3],
        preproc_fingerprint: metadata.get("preproc_fingerprint").unwrap_or("").to_string(),
    };

    let record_count = r.u64("record count")? as usize;
    let mut seen_params = std::collections::HashSet::new();
    for _ in 0..record_count {
        let record: Record<T> = read_record(&mut r)?;
        match (record.kind, record.data) {
            (KIND_PARAM, RecordData::Model(values)) => {
                let name = record.name.clone();
                let param = model
                    .params_mut()
                    .iter_mut()
                    .find(|p| p.name == name)
                    .ok_or_else(|| {
                        CheckpointError::NameSetMismatch(format!("unexpected parameter '{}'", name))
                    })?;
                if param.value.dims() != record.dims.as_slice() {
                    return Err(CheckpointError::NameSetMismatch(format!(
                        "parameter '{}' has shape {:?}, expected {:?}",
                        name,
                        record.dims,
                        param.value.dims()
                    )));
                }
                param.value = Tensor::new(&record.dims, values)
                    .map_err(|e| CheckpointError::Metadata(format!("parameter '{}': {}", name, e)))?;
                seen_params.insert(name);
            }
            (KIND_BUFFER, RecordData::Model(values)) => {
                let name = record.name;
                let (stage, field) = parse_bn_name(&name)?;
                let states = model.bn_states_mut();
                if stage == 0 || stage > states.len() {
                    return Err(CheckpointError::NameSetMismatch(format!(
                        "unexpected buffer '{}'",
                        name
                    )));
                }
                let state = &mut states[stage - 1];
                let target = match field {
                    BnField::Mean => &mut state.running_mean,
                    BnField::Var => &mut state.running_var,
                };
                if target.len() != values.len() {
                    return Err(CheckpointError::NameSetMismatch(format!(
                        "buffer '{}' has {} values, expected {}",
                        name,
                        values.len(),
                        target.len()
                    )));
                }
                *target = values;
            }
            (KIND_F64_BUFFER, RecordData::F64(values)) => {
                let into = match record.name.as_str() {
                    "preproc.mean" => &mut meta.preproc_mean,
                    "preproc.std" => &mut meta.preproc_std,
                    other => {
                        return Err(CheckpointError::NameSetMismatch(format!(
                            "unexpected buffer '{}'",
                            other
                        )))
                    }
                };
                if values.len() != 3 {
                    return Err(CheckpointError::Truncated(record.name));
                }
                into.copy_from_slice(&values);
            }
            _ => {
                return Err(CheckpointError::Metadata(format!(
                    "record '{}' has inconsistent kind",
                    record.name
                )))
            }
        }
    }

    for p in model.params().iter() {
        if !seen_params.contains(&p.name) {
            return Err(CheckpointError::NameSetMismatch(format!(
                "missing parameter '{}'",
                p.name
            )));
        }
    }

    let init_flags: Vec<bool> = metadata
        .get("bn_initialized")?
        .split(',')
        .map(|t| t == "1")
        .collect();
    if init_flags.len() != model.bn_states().len() {
        return Err(CheckpointError::Metadata("bn_initialized length mismatch".into()));
    }
    for (state, init) in model.bn_states_mut().iter_mut().zip(init_flags) {
        state.initialized = init;
    }

    Ok((model, meta))
}

enum BnField {
    Mean,
    Var,
}

fn parse_bn_name(name: &str) -> Result<(usize, BnField), CheckpointError> {
    let bad = || CheckpointError::NameSetMismatch(format!("unexpected buffer '{}'", name));
    let rest = name.strip_prefix("bn.stage").ok_or_else(bad)?;
    if let Some(idx) = rest.strip_suffix(".running_mean") {
        Ok((idx.parse().map_err(|_| bad())?, BnField::Mean))
    } else if let Some(idx) = rest.strip_suffix(".running_var") {
        Ok((idx.parse().map_err(|_| bad())?, BnField::Var))
    } else {
        Err(bad())
    }
}
