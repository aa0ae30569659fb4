//! Unified checkpoint container: a key/value config block plus named f64
//! tensors, written little-endian behind the `RACTCKPT` magic. Actor and
//! critic parameters, optimizer moments, the best-validation snapshot and the
//! metrics log all ride in one file, so a load reproduces training exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{read_string, read_u64, write_string, write_u64};
use crate::error::{Error, Result};
use crate::nn::DenseMatrix;

const CKPT_MAGIC: &[u8; 8] = b"RACTCKPT";
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub kv: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, DenseMatrix>,
}

impl Checkpoint {
    pub fn new() -> Self {
        let mut c = Self::default();
        c.kv.insert("format_version".into(), FORMAT_VERSION.into());
        c
    }

    pub fn insert_tensor(&mut self, name: &str, m: DenseMatrix) {
        self.tensors.insert(name.to_string(), m);
    }

    pub fn insert_vec(&mut self, name: &str, v: &[f64]) {
        self.tensors
            .insert(name.to_string(), DenseMatrix::from_vec(1, v.len(), v.to_vec()));
    }

    pub fn tensor(&self, name: &str) -> Result<&DenseMatrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn vec(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.tensor(name)?;
        if t.rows() != 1 {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` is {}x{}, expected a single row",
                t.rows(),
                t.cols()
            )));
        }
        Ok(t.data().to_vec())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.kv
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing key `{key}`")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("unparseable value for `{key}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        write_u64(&mut w, self.kv.len() as u64)?;
        for (k, v) in &self.kv {
            write_string(&mut w, k)?;
            write_string(&mut w, v)?;
        }
        write_u64(&mut w, self.tensors.len() as u64)?;
        for (name, t) in &self.tensors {
            write_string(&mut w, name)?;
            write_u64(&mut w, t.rows() as u64)?;
            write_u64(&mut w, t.cols() as u64)?;
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| {
            Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
        })?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file truncated before magic".into()))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic in {}: expected RACTCKPT",
                path.display()
            )));
        }
        let mut kv = BTreeMap::new();
        let n_kv = read_u64(&mut r).map_err(truncated)?;
        for _ in 0..n_kv {
            let k = read_string(&mut r).map_err(truncated)?;
            let v = read_string(&mut r).map_err(truncated)?;
            kv.insert(k, v);
        }
        match kv.get("format_version").map(String::as_str) {
            Some(FORMAT_VERSION) => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint format version {other:?}"
                )))
            }
        }
        let mut tensors = BTreeMap::new();
        let n_tensors = read_u64(&mut r).map_err(truncated)?;
        for _ in 0..n_tensors {
            let name = read_string(&mut r).map_err(truncated)?;
            let rows = read_u64(&mut r).map_err(truncated)? as usize;
            let cols = read_u64(&mut r).map_err(truncated)? as usize;
            if rows.checked_mul(cols).map(|n| n > 1 << 30).unwrap_or(true) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has implausible shape {rows}x{cols}"
                )));
            }
            let mut data = vec![0.0f64; rows * cols];
            for x in &mut data {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Checkpoint("file truncated mid-tensor".into()))?;
                *x = f64::from_le_bytes(buf);
            }
            tensors.insert(name, DenseMatrix::from_vec(rows, cols, data));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self { kv, tensors })
    }
}

fn truncated(_: Error) -> Error {
    Error::Checkpoint("file truncated".into())
}

use crate::actor::{ActorConfig, ActorParams};
use crate::critic::{Critic, CriticFeatureSet};
use crate::nn::{AdamHyper, AdamState, AffineLayer};

pub fn put_actor(c: &mut Checkpoint, prefix: &str, params: &ActorParams) {
    let mut put_layer = |name: &str, layer: &AffineLayer| {
        c.insert_tensor(&format!("{prefix}{name}.weight"), layer.weight.clone());
        c.insert_vec(&format!("{prefix}{name}.bias"), &layer.bias);
    };
    if let Some(l) = &params.enc_hidden {
        put_layer("actor.enc_hidden", l);
    }
    put_layer("actor.enc_out", &params.enc_out);
    if let Some(l) = &params.dec_hidden {
        put_layer("actor.dec_hidden", l);
    }
    put_layer("actor.dec_out", &params.dec_out);
}

fn get_layer(c: &Checkpoint, name: &str, in_dim: usize, out_dim: usize) -> Result<AffineLayer> {
    let weight = c.tensor(&format!("{name}.weight"))?.clone();
    if weight.shape() != (in_dim, out_dim) {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}.weight` is {}x{}, expected {in_dim}x{out_dim}",
            weight.rows(),
            weight.cols()
        )));
    }
    let bias = c.vec(&format!("{name}.bias"))?;
    if bias.len() != out_dim {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}.bias` has length {}, expected {out_dim}",
            bias.len()
        )));
    }
    Ok(AffineLayer { weight, bias })
}

pub fn get_actor(
    c: &Checkpoint,
    prefix: &str,
    config: &ActorConfig,
    n_items: usize,
) -> Result<ActorParams> {
    let k = config.latent_dim;
    let name = |s: &str| format!("{prefix}actor.{s}");
    if config.shallow {
        Ok(ActorParams {
            enc_hidden: None,
            enc_out: get_layer(c, &name("enc_out"), n_items, k)?,
            dec_hidden: None,
            dec_out: get_layer(c, &name("dec_out"), k, n_items)?,
        })
    } else if config.linear {
        Ok(ActorParams {
            enc_hidden: None,
            enc_out: get_layer(c, &name("enc_out"), n_items, 2 * k)?,
            dec_hidden: None,
            dec_out: get_layer(c, &name("dec_out"), k, n_items)?,
        })
    } else {
        let h = config.hidden_dim;
        Ok(ActorParams {
            enc_hidden: Some(get_layer(c, &name("enc_hidden"), n_items, h)?),
            enc_out: get_layer(c, &name("enc_out"), h, 2 * k)?,
            dec_hidden: Some(get_layer(c, &name("dec_hidden"), k, h)?),
            dec_out: get_layer(c, &name("dec_out"), h, n_items)?,
        })
    }
}

pub fn put_critic(c: &mut Checkpoint, prefix: &str, critic: &Critic) {
    c.insert_vec(&format!("{prefix}critic.bn.gamma"), &critic.bn.gamma);
    c.insert_vec(&format!("{prefix}critic.bn.beta"), &critic.bn.beta_shift);
    c.insert_vec(
        &format!("{prefix}critic.bn.running_mean"),
        &critic.bn.running_mean,
    );
    c.insert_vec(
        &format!("{prefix}critic.bn.running_var"),
        &critic.bn.running_var,
    );
    for (i, l) in critic.layers.iter().enumerate() {
        c.insert_tensor(&format!("{prefix}critic.l{i}.weight"), l.weight.clone());
        c.insert_vec(&format!("{prefix}critic.l{i}.bias"), &l.bias);
    }
}

pub fn get_critic(
    c: &Checkpoint,
    prefix: &str,
    feature_set: CriticFeatureSet,
) -> Result<Critic> {
    let mut critic = Critic::new(feature_set, 0);
    let dim = feature_set.dim();
    let expect = |v: &Vec<f64>, what: &str| -> Result<()> {
        if v.len() != dim {
            return Err(Error::Checkpoint(format!(
                "critic {what} has length {}, expected {dim}",
                v.len()
            )));
        }
        Ok(())
    };
    critic.bn.gamma = c.vec(&format!("{prefix}critic.bn.gamma"))?;
    expect(&critic.bn.gamma, "bn.gamma")?;
    critic.bn.beta_shift = c.vec(&format!("{prefix}critic.bn.beta"))?;
    expect(&critic.bn.beta_shift, "bn.beta")?;
    critic.bn.running_mean = c.vec(&format!("{prefix}critic.bn.running_mean"))?;
    expect(&critic.bn.running_mean, "bn.running_mean")?;
    critic.bn.running_var = c.vec(&format!("{prefix}critic.bn.running_var"))?;
    expect(&critic.bn.running_var, "bn.running_var")?;
    for i in 0..critic.layers.len() {
        let shape = (critic.layers[i].in_dim(), critic.layers[i].out_dim());
        let layer = get_layer(c, &format!("{prefix}critic.l{i}"), shape.0, shape.1)?;
        critic.layers[i] = layer;
    }
    Ok(critic)
}

/// Adam state rides as one row `[step, m..., v...]`; the step count is exact
/// in an f64 for any realistic run length.
pub fn put_adam(c: &mut Checkpoint, name: &str, state: &AdamState) {
    let mut row = Vec::with_capacity(1 + 2 * state.m.len());
    row.push(state.step as f64);
    row.extend_from_slice(&state.m);
    row.extend_from_slice(&state.v);
    c.insert_vec(name, &row);
}

pub fn get_adam(c: &Checkpoint, name: &str, len: usize, hyper: AdamHyper) -> Result<AdamState> {
    let row = c.vec(name)?;
    if row.len() != 1 + 2 * len {
        return Err(Error::Checkpoint(format!(
            "optimizer tensor `{name}` has length {}, expected {}",
            row.len(),
            1 + 2 * len
        )));
    }
    Ok(AdamState {
        step: row[0] as u64,
        m: row[1..1 + len].to_vec(),
        v: row[1 + len..].to_vec(),
        hyper,
    })
}
