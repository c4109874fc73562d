//! Binary checkpoint format.
//!
//! Little-endian layout: magic "MADC", version u32, config-blob length +
//! bytes (the TOML pipeline config), then repeated named arrays
//! (name length u32, name bytes, ndims u32, dims u32[], f32 data), with a
//! trailing CRC32 of every preceding byte. Record order is fixed, so
//! save -> load -> save is byte-identical.
//!
//! Counters and the RNG state are packed losslessly into f32 records as
//! u16 chunks (four per u64), keeping the format uniform.

use std::path::Path;

use thiserror::Error;

use crate::anomaly::{RefineLevel, RefinementParams};
use crate::backbone::init_backbone;
use crate::config::{ConfigError, PipelineConfig};
use crate::distill::init_discriminator;
use crate::params::ParamSet;
use crate::tensor::{Adam, AdamHyperparams, AdamState};

pub const MAGIC: [u8; 4] = *b"MADC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint corrupted: CRC32 mismatch")]
    Crc,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("checkpoint does not match its config: {0}")]
    Schema(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Optimizer snapshot: the shared step counter plus first/second moments
/// for every trainable parameter, in parameter-set order.
#[derive(Clone, Debug, Default)]
pub struct OptSnapshot {
    pub t: u64,
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

impl OptSnapshot {
    pub fn capture(adam: &Adam<f32>, params: &ParamSet<f32>) -> Self {
        let states: std::collections::HashMap<&String, &AdamState<f32>> =
            adam.states().collect();
        let moments = params
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| match states.get(&e.name) {
                Some(st) => (e.name.clone(), st.m.clone(), st.v.clone()),
                None => (
                    e.name.clone(),
                    vec![0.0; e.value.numel()],
                    vec![0.0; e.value.numel()],
                ),
            })
            .collect();
        OptSnapshot {
            t: adam.t(),
            moments,
        }
    }

    pub fn restore(&self, hp: AdamHyperparams) -> Adam<f32> {
        let mut adam = Adam::new(hp);
        adam.set_t(self.t);
        for (name, m, v) in &self.moments {
            adam.insert_state(
                name.clone(),
                AdamState {
                    m: m.clone(),
                    v: v.clone(),
                },
            );
        }
        adam
    }
}

#[derive(Clone, Debug, Default)]
pub struct LossHistory {
    pub l_g: Vec<f32>,
    pub l_d: Vec<f32>,
    pub l_adv: Vec<f32>,
    pub l_s: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    pub teacher: ParamSet<f32>,
    pub student: ParamSet<f32>,
    pub discriminator: Option<ParamSet<f32>>,
    pub refinement: Option<RefinementParams>,
    pub opt_student: OptSnapshot,
    pub opt_disc: Option<OptSnapshot>,
    pub rng_state: [u64; 4],
    pub step: u64,
    pub history: LossHistory,
}

fn u64_to_f32s(x: u64) -> [f32; 4] {
    [
        (x & 0xFFFF) as f32,
        ((x >> 16) & 0xFFFF) as f32,
        ((x >> 32) & 0xFFFF) as f32,
        ((x >> 48) & 0xFFFF) as f32,
    ]
}

fn f32s_to_u64(chunks: &[f32]) -> u64 {
    let mut x = 0u64;
    for (i, &c) in chunks.iter().take(4).enumerate() {
        x |= ((c as u64) & 0xFFFF) << (16 * i);
    }
    x
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn record(&mut self, name: &str, dims: &[usize], data: &[f32]) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.u32(name.len() as u32);
        self.buf.extend_from_slice(name.as_bytes());
        self.u32(dims.len() as u32);
        for &d in dims {
            self.u32(d as u32);
        }
        for &v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn param_set(&mut self, prefix: &str, set: &ParamSet<f32>) {
        for e in set.entries() {
            self.record(
                &format!("{prefix}.{}", e.name),
                e.value.shape(),
                e.value.data(),
            );
        }
    }

    fn opt(&mut self, prefix: &str, snap: &OptSnapshot) {
        self.record(&format!("{prefix}.t"), &[4], &u64_to_f32s(snap.t));
        for (name, m, v) in &snap.moments {
            self.record(&format!("{prefix}.{name}.m"), &[m.len()], m);
            self.record(&format!("{prefix}.{name}.v"), &[v.len()], v);
        }
    }
}

/// Serialize a checkpoint to its byte representation.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    let blob = ckpt.config.to_toml();
    w.u32(blob.len() as u32);
    w.buf.extend_from_slice(blob.as_bytes());

    w.param_set("teacher", &ckpt.teacher);
    w.param_set("student", &ckpt.student);
    if let Some(d) = &ckpt.discriminator {
        w.param_set("disc", d);
    }
    if let Some(r) = &ckpt.refinement {
        let data: Vec<f32> = r
            .levels
            .iter()
            .flat_map(|l| [l.mean, l.var, l.scale, l.bias])
            .collect();
        w.record("refine.levels", &[r.levels.len(), 4], &data);
    }
    w.opt("opt.student", &ckpt.opt_student);
    if let Some(od) = &ckpt.opt_disc {
        w.opt("opt.disc", od);
    }
    let rng: Vec<f32> = ckpt.rng_state.iter().flat_map(|&x| u64_to_f32s(x)).collect();
    w.record("rng.state", &[16], &rng);
    w.record("train.step", &[4], &u64_to_f32s(ckpt.step));
    w.record("history.l_g", &[ckpt.history.l_g.len()], &ckpt.history.l_g);
    w.record("history.l_d", &[ckpt.history.l_d.len()], &ckpt.history.l_d);
    w.record(
        "history.l_adv",
        &[ckpt.history.l_adv.len()],
        &ckpt.history.l_adv,
    );
    w.record("history.l_s", &[ckpt.history.l_s.len()], &ckpt.history.l_s);

    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(ckpt)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

type RawRecord = (String, Vec<usize>, Vec<f32>);

fn parse_records(bytes: &[u8]) -> Result<(PipelineConfig, Vec<RawRecord>)> {
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated("header".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    // CRC over everything but the last four bytes.
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(CheckpointError::Crc);
    }
    let mut r = Reader {
        bytes: body,
        pos: 4,
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let blob_len = r.u32("config length")? as usize;
    let blob = r.take(blob_len, "config blob")?;
    let config = PipelineConfig::from_toml(
        std::str::from_utf8(blob)
            .map_err(|_| CheckpointError::Schema("config blob is not UTF-8".into()))?,
    )?;

    let mut records = Vec::new();
    while r.pos < body.len() {
        let name_len = r.u32("record name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "record name")?)
            .map_err(|_| CheckpointError::Schema("record name is not UTF-8".into()))?
            .to_string();
        let ndims = r.u32(&format!("{name} ndims"))? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.u32(&format!("{name} dims"))? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4, &name)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push((name, dims, data));
    }
    Ok((config, records))
}

/// Pull the next record, checking its name matches.
fn expect_record<'a>(
    records: &mut std::slice::Iter<'a, RawRecord>,
    name: &str,
) -> Result<&'a RawRecord> {
    match records.next() {
        Some(rec) if rec.0 == name => Ok(rec),
        Some(rec) => Err(CheckpointError::Schema(format!(
            "expected record {name}, found {}",
            rec.0
        ))),
        None => Err(CheckpointError::Schema(format!(
            "missing record {name}"
        ))),
    }
}

fn read_param_set<'a>(
    records: &mut std::slice::Iter<'a, RawRecord>,
    prefix: &str,
    mut schema: ParamSet<f32>,
) -> Result<ParamSet<f32>> {
    for i in 0..schema.len() {
        let (name, shape) = {
            let e = &schema.entries()[i];
            (e.name.clone(), e.value.shape().to_vec())
        };
        let rec = expect_record(records, &format!("{prefix}.{name}"))?;
        if rec.1 != shape {
            return Err(CheckpointError::Schema(format!(
                "{prefix}.{name}: shape {:?} in file, {shape:?} expected by config",
                rec.1
            )));
        }
        schema.get_mut(&name).data_mut().copy_from_slice(&rec.2);
    }
    Ok(schema)
}

fn read_opt<'a>(
    records: &mut std::slice::Iter<'a, RawRecord>,
    prefix: &str,
    params: &ParamSet<f32>,
) -> Result<OptSnapshot> {
    let t_rec = expect_record(records, &format!("{prefix}.t"))?;
    let t = f32s_to_u64(&t_rec.2);
    let mut moments = Vec::new();
    for e in params.entries().iter().filter(|e| e.trainable) {
        let m = expect_record(records, &format!("{prefix}.{}.m", e.name))?;
        let v = expect_record(records, &format!("{prefix}.{}.v", e.name))?;
        if m.2.len() != e.value.numel() || v.2.len() != e.value.numel() {
            return Err(CheckpointError::Schema(format!(
                "optimizer moments for {} have wrong length",
                e.name
            )));
        }
        moments.push((e.name.clone(), m.2.clone(), v.2.clone()));
    }
    Ok(OptSnapshot { t, moments })
}

/// Parse and validate a checkpoint against the architecture implied by its
/// embedded config.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (config, records) = parse_records(bytes)?;
    let mut it = records.iter();

    let teacher_schema = init_backbone::<f32>(&config.backbone, 0);
    let student_schema = init_backbone::<f32>(&config.backbone, 0);
    let teacher = read_param_set(&mut it, "teacher", teacher_schema)?;
    let student = read_param_set(&mut it, "student", student_schema)?;
    let discriminator = if config.discriminator_enabled {
        let schema = init_discriminator::<f32>(&config.discriminator_config(), 0);
        Some(read_param_set(&mut it, "disc", schema)?)
    } else {
        None
    };
    let refinement = if config.mff_enabled {
        let rec = expect_record(&mut it, "refine.levels")?;
        let expected_levels = config.backbone.num_levels();
        if rec.1 != [expected_levels, 4] {
            return Err(CheckpointError::Schema(format!(
                "refine.levels has dims {:?}, expected [{expected_levels}, 4]",
                rec.1
            )));
        }
        let levels = rec
            .2
            .chunks_exact(4)
            .map(|c| RefineLevel {
                mean: c[0],
                var: c[1],
                scale: c[2],
                bias: c[3],
            })
            .collect();
        Some(RefinementParams { levels })
    } else {
        None
    };
    let opt_student = read_opt(&mut it, "opt.student", &student)?;
    let opt_disc = match &discriminator {
        Some(d) => Some(read_opt(&mut it, "opt.disc", d)?),
        None => None,
    };
    let rng_rec = expect_record(&mut it, "rng.state")?;
    if rng_rec.2.len() != 16 {
        return Err(CheckpointError::Schema("rng.state must hold 16 chunks".into()));
    }
    let mut rng_state = [0u64; 4];
    for (i, chunk) in rng_rec.2.chunks_exact(4).enumerate() {
        rng_state[i] = f32s_to_u64(chunk);
    }
    let step = f32s_to_u64(&expect_record(&mut it, "train.step")?.2);
    let history = LossHistory {
        l_g: expect_record(&mut it, "history.l_g")?.2.clone(),
        l_d: expect_record(&mut it, "history.l_d")?.2.clone(),
        l_adv: expect_record(&mut it, "history.l_adv")?.2.clone(),
        l_s: expect_record(&mut it, "history.l_s")?.2.clone(),
    };
    if let Some(rec) = it.next() {
        return Err(CheckpointError::Schema(format!(
            "unexpected trailing record {}",
            rec.0
        )));
    }
    Ok(Checkpoint {
        config,
        teacher,
        student,
        discriminator,
        refinement,
        opt_student,
        opt_disc,
        rng_state,
        step,
        history,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    checkpoint_from_bytes(&bytes)
}
