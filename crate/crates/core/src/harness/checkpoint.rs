//! The `TACQ` binary container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "TACQ"  version:u8  kind:u8
//! schedule: n:u64  beta[n]:f64
//! fields: count:u32, then per field
//!     name_len:u16 name:utf8 tag:u8 body
//!     tag 0 array: rank:u8 dims[rank]:u64 data[prod(dims)]:f64
//!     tag 1 text:  len:u32 utf8
//!     tag 2 int:   u64
//! ```
//!
//! Magic and version are checked before anything else is read.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::correction::{CorrectionConfig, CorrectionTable};
use crate::diffusion::{NoiseSchedule, TimestepGrid};
use crate::error::{Error, Result};
use crate::models::{Arch, ModelSpec, NoiseModel};
use crate::quant::{QuantizedModel, Scheme};
use crate::samplers::Trajectory;
use crate::tensors::Tensor;

pub const MAGIC: &[u8; 4] = b"TACQ";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Model = 1,
    QModel = 2,
    Table = 3,
    Trace = 4,
    Samples = 5,
}

impl Kind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Kind::Model,
            2 => Kind::QModel,
            3 => Kind::Table,
            4 => Kind::Trace,
            5 => Kind::Samples,
            other => return Err(Error::format(format!("unknown checkpoint kind tag {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Array(Tensor),
    Text(String),
    Int(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub schedule: NoiseSchedule,
    pub fields: BTreeMap<String, Field>,
}

impl Container {
    pub fn new(kind: Kind, schedule: &NoiseSchedule) -> Self {
        Self {
            kind,
            schedule: schedule.clone(),
            fields: BTreeMap::new(),
        }
    }

    pub fn put_array(&mut self, name: &str, t: Tensor) {
        self.fields.insert(name.into(), Field::Array(t));
    }

    pub fn put_text(&mut self, name: &str, s: impl Into<String>) {
        self.fields.insert(name.into(), Field::Text(s.into()));
    }

    pub fn put_int(&mut self, name: &str, v: u64) {
        self.fields.insert(name.into(), Field::Int(v));
    }

    fn missing(name: &str) -> Error {
        Error::format(format!("checkpoint field `{name}` missing or of the wrong type"))
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        match self.fields.get(name) {
            Some(Field::Array(t)) => Ok(t),
            _ => Err(Self::missing(name)),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.fields.get(name) {
            Some(Field::Text(s)) => Ok(s),
            _ => Err(Self::missing(name)),
        }
    }

    pub fn int(&self, name: &str) -> Result<u64> {
        match self.fields.get(name) {
            Some(Field::Int(v)) => Ok(*v),
            _ => Err(Self::missing(name)),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.fields.contains_key(name)
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.kind as u8);
        let betas = self.schedule.betas();
        out.extend_from_slice(&(betas.len() as u64).to_le_bytes());
        for b in betas {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out.extend_from_slice(&(self.fields.len() as u32).to_le_bytes());
        for (name, field) in &self.fields {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match field {
                Field::Array(t) => {
                    out.push(0);
                    out.push(t.rank() as u8);
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Field::Text(s) => {
                    out.push(1);
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
                Field::Int(v) => {
                    out.push(2);
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::format("not a TACQ checkpoint (bad magic)"));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {} (this build reads version {VERSION})",
                bytes[4]
            )));
        }
        let kind = Kind::from_u8(bytes[5])?;
        let mut r = Reader { bytes, pos: 6 };
        let n = r.len_u64()?;
        let betas = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let schedule = NoiseSchedule::from_betas(betas).map_err(|e| e.context("checkpoint schedule"))?;
        let count = r.u32()?;
        let mut fields = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format("field name is not UTF-8"))?;
            let field = match r.take(1)?[0] {
                0 => {
                    let rank = r.take(1)?[0] as usize;
                    let shape = (0..rank).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
                    let count = shape
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .filter(|&c| c <= r.remaining() / 8)
                        .ok_or_else(|| Error::format(format!("array `{name}` larger than the file")))?;
                    let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    Field::Array(Tensor::new(shape, data)?)
                }
                1 => {
                    let len = r.u32()? as usize;
                    Field::Text(String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format("text field is not UTF-8"))?)
                }
                2 => Field::Int(r.u64()?),
                tag => return Err(Error::format(format!("unknown field tag {tag} for `{name}`"))),
            };
            if fields.insert(name.clone(), field).is_some() {
                return Err(Error::format(format!("duplicate field `{name}`")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::format(format!("{} trailing bytes after payload", r.remaining())));
        }
        Ok(Self { kind, schedule, fields })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format("length overflows usize"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn put_spec(c: &mut Container, spec: &ModelSpec) {
    c.put_text("model.arch", spec.arch.to_string());
    for (k, v) in [
        ("model.c", spec.io_shape[0]),
        ("model.h", spec.io_shape[1]),
        ("model.w", spec.io_shape[2]),
        ("model.time_embed_dim", spec.time_embed_dim),
        ("model.width", spec.width),
        ("model.hidden_layers", spec.hidden_layers),
    ] {
        c.put_int(k, v as u64);
    }
}

fn get_spec(c: &Container) -> Result<ModelSpec> {
    let int = |k: &str| c.int(k).map(|v| v as usize);
    Ok(ModelSpec {
        arch: c.text("model.arch")?.parse::<Arch>()?,
        io_shape: [int("model.c")?, int("model.h")?, int("model.w")?],
        time_embed_dim: int("model.time_embed_dim")?,
        width: int("model.width")?,
        hidden_layers: int("model.hidden_layers")?,
    })
}

fn put_params(c: &mut Container, model: &NoiseModel) {
    c.put_int("params.count", model.params().len() as u64);
    for (i, p) in model.params().iter().enumerate() {
        c.put_array(&format!("param.{i:03}"), p.clone());
    }
}

fn get_model(c: &Container) -> Result<NoiseModel> {
    let spec = get_spec(c)?;
    let n = c.int("params.count")? as usize;
    let params = (0..n)
        .map(|i| c.array(&format!("param.{i:03}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    NoiseModel::from_params(spec, params)
}

pub fn model_to_container(model: &NoiseModel, schedule: &NoiseSchedule) -> Container {
    let mut c = Container::new(Kind::Model, schedule);
    put_spec(&mut c, model.spec());
    put_params(&mut c, model);
    c
}

pub fn model_from_container(c: &Container) -> Result<NoiseModel> {
    c.expect_kind(Kind::Model)?;
    get_model(c)
}

pub fn qmodel_to_container(q: &QuantizedModel, schedule: &NoiseSchedule) -> Container {
    let mut c = Container::new(Kind::QModel, schedule);
    put_spec(&mut c, q.base().spec());
    put_params(&mut c, q.base());
    c.put_int("quant.weight_bits", q.weight_bits() as u64);
    c.put_int("quant.act_bits", q.act_bits() as u64);
    c.put_text("quant.scheme", q.weight_scheme().to_string());
    let ranges = q.act_ranges();
    let flat: Vec<f64> = ranges.iter().flat_map(|&(lo, hi)| [lo, hi]).collect();
    c.put_array("quant.act_ranges", Tensor::new(vec![ranges.len(), 2], flat).expect("shape matches"));
    // Derived quantizer parameters, stored for inspection; `NaN` marks a pass-through tensor.
    let scales = |qs: Vec<Option<f64>>| Tensor::from_vec(qs.into_iter().map(|s| s.unwrap_or(f64::NAN)).collect());
    c.put_array("quant.weight_scales", scales(q.weight_qparams().iter().map(|p| p.map(|p| p.scale)).collect()));
    c.put_array("quant.act_scales", scales(q.act_qparams().iter().map(|p| p.map(|p| p.scale)).collect()));
    c.put_array(
        "quant.act_zero_points",
        scales(q.act_qparams().iter().map(|p| p.map(|p| p.zero_point as f64)).collect()),
    );
    c
}

pub fn qmodel_from_container(c: &Container) -> Result<QuantizedModel> {
    c.expect_kind(Kind::QModel)?;
    let base = get_model(c)?;
    let ranges = c.array("quant.act_ranges")?;
    if ranges.rank() != 2 || ranges.shape()[1] != 2 {
        return Err(Error::format("activation ranges must be [sites, 2]"));
    }
    let ranges = ranges.data().chunks_exact(2).map(|r| (r[0], r[1])).collect();
    let q = QuantizedModel::from_ranges(
        base,
        c.int("quant.weight_bits")? as u32,
        c.int("quant.act_bits")? as u32,
        c.text("quant.scheme")?.parse::<Scheme>()?,
        ranges,
    )?;
    let again = qmodel_to_container(&q, &c.schedule);
    for key in ["quant.weight_scales", "quant.act_scales", "quant.act_zero_points"] {
        let (a, b) = (again.array(key)?, c.array(key)?);
        let same = a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(Error::format(format!("stored `{key}` disagree with the recomputed quantizers")));
        }
    }
    Ok(q)
}

fn config_text(cfg: &CorrectionConfig) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "lambda1={}\nlambda2={}\nk_threshold={}\ncalib_batch={}\neps_floor={}\napply_ibc={}\napply_ner={}\n\
         first_step_only={}\nestimation_bias_only={}\neq22_literal_placement={}\nsigned_mask={}\ndecoupled={}\ndpm_ibc={}\n",
        cfg.lambda1,
        cfg.lambda2,
        cfg.k_threshold,
        cfg.calib_batch,
        cfg.eps_floor,
        cfg.apply_ibc,
        cfg.apply_ner,
        cfg.first_step_only,
        cfg.estimation_bias_only,
        cfg.eq22_literal_placement,
        cfg.signed_mask,
        cfg.decoupled,
        cfg.dpm_ibc
    );
    s
}

fn parse_config_text(text: &str) -> Result<CorrectionConfig> {
    let mut cfg = CorrectionConfig::default();
    let mut seen = 0;
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad correction config line `{line}`")))?;
        let bad = || Error::format(format!("bad value for `{k}`: `{v}`"));
        macro_rules! p {
            ($field:ident) => {
                cfg.$field = v.parse().map_err(|_| bad())?
            };
        }
        match k {
            "lambda1" => p!(lambda1),
            "lambda2" => p!(lambda2),
            "k_threshold" => p!(k_threshold),
            "calib_batch" => p!(calib_batch),
            "eps_floor" => p!(eps_floor),
            "apply_ibc" => p!(apply_ibc),
            "apply_ner" => p!(apply_ner),
            "first_step_only" => p!(first_step_only),
            "estimation_bias_only" => p!(estimation_bias_only),
            "eq22_literal_placement" => p!(eq22_literal_placement),
            "signed_mask" => p!(signed_mask),
            "decoupled" => p!(decoupled),
            "dpm_ibc" => p!(dpm_ibc),
            other => return Err(Error::format(format!("unknown correction config key `{other}`"))),
        }
        seen += 1;
    }
    if seen != 13 {
        return Err(Error::format("incomplete correction config block"));
    }
    Ok(cfg)
}

pub fn table_to_container(table: &CorrectionTable, schedule: &NoiseSchedule) -> Container {
    let mut c = Container::new(Kind::Table, schedule);
    c.put_array("grid.times", Tensor::from_vec(table.grid.times().to_vec()));
    if let Some(m) = table.grid.mids() {
        c.put_array("grid.mids", Tensor::from_vec(m.to_vec()));
    }
    c.put_text("config", config_text(&table.config));
    c.put_array("k", table.k.clone());
    c.put_array("b", table.b.clone());
    c.put_array("eps_bias", table.eps_bias.clone());
    c.put_array("tau", Tensor::from_vec(table.tau.clone()));
    c.put_array("mask_coverage", Tensor::from_vec(table.mask_coverage.clone()));
    c
}

pub fn table_from_container(c: &Container) -> Result<CorrectionTable> {
    c.expect_kind(Kind::Table)?;
    let mids = if c.has("grid.mids") {
        Some(c.array("grid.mids")?.data().to_vec())
    } else {
        None
    };
    let grid = TimestepGrid::from_parts(c.array("grid.times")?.data().to_vec(), mids, c.schedule.len())?;
    let table = CorrectionTable {
        k: c.array("k")?.clone(),
        b: c.array("b")?.clone(),
        eps_bias: c.array("eps_bias")?.clone(),
        tau: c.array("tau")?.data().to_vec(),
        mask_coverage: c.array("mask_coverage")?.data().to_vec(),
        config: parse_config_text(c.text("config")?)?,
        grid,
    };
    table.validate()?;
    Ok(table)
}

pub fn samples_to_container(samples: &Tensor, seed: u64, label: &str, schedule: &NoiseSchedule) -> Container {
    let mut c = Container::new(Kind::Samples, schedule);
    c.put_array("samples", samples.clone());
    c.put_int("seed", seed);
    c.put_text("label", label);
    c
}

/// `(samples, seed, label)`.
pub fn samples_from_container(c: &Container) -> Result<(Tensor, u64, String)> {
    c.expect_kind(Kind::Samples)?;
    Ok((c.array("samples")?.clone(), c.int("seed")?, c.text("label")?.to_owned()))
}

pub fn trajectory_to_container(traj: &Trajectory, site_names: &[String], schedule: &NoiseSchedule) -> Container {
    let mut c = Container::new(Kind::Trace, schedule);
    c.put_array("times", Tensor::from_vec(traj.times.clone()));
    c.put_text("sites", site_names.join("\n"));
    for (p, x) in traj.inputs.iter().enumerate() {
        c.put_array(&format!("input.{p:04}"), x.clone());
    }
    for (p, sites) in traj.activations.iter().enumerate() {
        for (s, v) in sites.iter().enumerate() {
            c.put_array(&format!("act.{p:04}.{s:02}"), Tensor::from_vec(v.clone()));
        }
    }
    c
}

/// `(trajectory, site names)`.
pub fn trajectory_from_container(c: &Container) -> Result<(Trajectory, Vec<String>)> {
    c.expect_kind(Kind::Trace)?;
    let times = c.array("times")?.data().to_vec();
    let sites: Vec<String> = match c.text("sites")? {
        "" => Vec::new(),
        s => s.lines().map(str::to_owned).collect(),
    };
    let mut inputs = Vec::new();
    let mut activations = Vec::new();
    for p in 0..times.len() {
        let key = format!("input.{p:04}");
        if c.has(&key) {
            inputs.push(c.array(&key)?.clone());
        }
        let acts: Vec<Vec<f64>> = (0..sites.len())
            .map_while(|s| c.array(&format!("act.{p:04}.{s:02}")).ok().map(|t| t.data().to_vec()))
            .collect();
        if !acts.is_empty() {
            activations.push(acts);
        }
    }
    Ok((Trajectory { times, inputs, activations }, sites))
}
