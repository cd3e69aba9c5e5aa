//! Parameter checkpoints.
//!
//! Layout (little-endian): `b"DCKP"`, `u32` version (= 1), `u32` block count,
//! then per block `u32` name length, UTF-8 name, `u32` rank, `rank` × `u32`
//! dims, and the product of the dims as `f32` values in row-major order.
//! Scalars have rank 0 and one value.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DarnetError, Result};
use crate::model::DarnetModel;

const MAGIC: &[u8; 4] = b"DCKP";
const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub type Blocks = BTreeMap<String, Block>;

pub fn write_blocks<W: Write>(mut w: W, blocks: &Blocks) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for (name, b) in blocks {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(b.shape.len() as u32).to_le_bytes())?;
        for &d in &b.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &b.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn malformed(msg: impl Into<String>) -> DarnetError {
    DarnetError::MalformedCheckpoint(msg.into())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| malformed(format!("truncated {what}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_blocks<R: Read>(mut r: R) -> Result<Blocks> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| malformed("truncated header"))?;
    if &magic != MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = read_u32(&mut r, "header")?;
    if version != VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, "header")?;
    let mut blocks = Blocks::new();
    for _ in 0..count {
        let len = read_u32(&mut r, "name length")? as usize;
        let mut name = vec![0u8; len.min(1 << 16)];
        if len > name.len() {
            return Err(malformed("block name too long"));
        }
        r.read_exact(&mut name)
            .map_err(|_| malformed("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| malformed("block name is not UTF-8"))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        if rank > MAX_RANK {
            return Err(malformed(format!("block `{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(&mut r, "dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| malformed(format!("block `{name}` is too large")))?;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|_| malformed(format!("truncated block `{name}`")))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(malformed(format!("block `{name}` has non-finite values")));
        }
        if blocks
            .insert(name.clone(), Block { shape, values })
            .is_some()
        {
            return Err(malformed(format!("duplicate block `{name}`")));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| malformed(e.to_string()))? != 0 {
        return Err(malformed("trailing bytes"));
    }
    Ok(blocks)
}

fn block(shape: &[usize], values: &[f64]) -> Block {
    Block {
        shape: shape.to_vec(),
        values: values.iter().map(|&v| v as f32).collect(),
    }
}

/// Every learnable tensor and threshold scalar of the model.
pub fn model_blocks(model: &DarnetModel) -> Blocks {
    let mut out = Blocks::new();
    for (i, c) in model.extractor.blocks().iter().enumerate() {
        let (o, k) = c.weight.dim();
        out.insert(
            format!("backbone.{i}.weight"),
            block(&[o, k], c.weight.as_slice().expect("contiguous")),
        );
        out.insert(
            format!("backbone.{i}.bias"),
            block(&[o], c.bias.as_slice().expect("contiguous")),
        );
    }
    let d = &model.dam;
    let c = d.channels();
    out.insert(
        "dam.eca_kernel".into(),
        block(
            &[d.kernel_size()],
            d.eca_kernel.as_slice().expect("contiguous"),
        ),
    );
    out.insert(
        "dam.conv1x1_weight".into(),
        block(&[c, c], d.conv1x1_weight.as_slice().expect("contiguous")),
    );
    out.insert(
        "dam.conv1x1_bias".into(),
        block(&[c], d.conv1x1_bias.as_slice().expect("contiguous")),
    );
    let t = &model.thresholds;
    for (name, v) in [
        ("tau_fg", t.tau_fg),
        ("tau_bg", t.tau_bg),
        ("tau_initial", t.tau_initial),
        ("kappa", t.kappa),
        ("lambda_logit", t.lambda_logit),
        ("delta", t.delta),
    ] {
        out.insert(format!("thresholds.{name}"), block(&[], &[v]));
    }
    out
}

/// Copies every block into `model`, which must have the same architecture.
/// Unknown or missing blocks are errors.
pub fn apply_blocks(model: &mut DarnetModel, blocks: &Blocks) -> Result<()> {
    let expected = model_blocks(model);
    for name in blocks.keys() {
        if !expected.contains_key(name) {
            return Err(malformed(format!("unexpected block `{name}`")));
        }
    }
    for (name, e) in &expected {
        let got = blocks
            .get(name)
            .ok_or_else(|| malformed(format!("missing block `{name}`")))?;
        if got.shape != e.shape {
            return Err(malformed(format!(
                "block `{name}` has shape {:?}, model expects {:?}",
                got.shape, e.shape
            )));
        }
    }
    let get =
        |name: &str| -> Vec<f64> { blocks[name].values.iter().map(|&v| f64::from(v)).collect() };
    let n_blocks = model.extractor.blocks().len();
    {
        let mut params = model.extractor.params_mut();
        for i in 0..n_blocks {
            params[2 * i].copy_from_slice(&get(&format!("backbone.{i}.weight")));
            params[2 * i + 1].copy_from_slice(&get(&format!("backbone.{i}.bias")));
        }
    }
    let [k, w, b] = model.dam.params_mut();
    k.copy_from_slice(&get("dam.eca_kernel"));
    w.copy_from_slice(&get("dam.conv1x1_weight"));
    b.copy_from_slice(&get("dam.conv1x1_bias"));
    let t = &mut model.thresholds;
    let scalar = |name: &str| get(&format!("thresholds.{name}"))[0];
    t.tau_fg = scalar("tau_fg");
    t.tau_bg = scalar("tau_bg");
    t.tau_initial = scalar("tau_initial");
    t.kappa = scalar("kappa");
    t.lambda_logit = scalar("lambda_logit");
    t.delta = scalar("delta");
    model.dam.validate()
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &DarnetModel) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DarnetError::io(path, e))?;
    write_blocks(BufWriter::new(file), &model_blocks(model)).map_err(|e| DarnetError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, model: &mut DarnetModel) -> Result<()> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DarnetError::io(path, e))?;
    apply_blocks(model, &read_blocks(BufReader::new(file))?)
}
