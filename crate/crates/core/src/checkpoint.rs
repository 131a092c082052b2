//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic  b"LSNK"            4 bytes
//! version u32               currently 1
//! config  u32 len + JSON    architecture config
//! epoch   u64
//! metric  f64
//! fold    u8 flag + u64
//! params  u32 count, then per parameter:
//!         u32 name len + UTF-8 name, u32 rank, rank × u64 dims, f64 data
//! adam    u8 flag; if set: u64 t, f64 lr, beta1, beta2, eps,
//!         then first moments and second moments in parameter order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig, NamedArray};
use crate::optim::AdamState;
use crate::rng::seeded;

pub const MAGIC: &[u8; 4] = b"LSNK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub metric: f64,
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: Vec<NamedArray>,
    pub adam: Option<AdamState>,
}

fn fmt_err(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta, adam: Option<&AdamState>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            meta,
            params: model.snapshot(),
            adam: adam.cloned(),
        }
    }

    /// Rebuilds the architecture from the stored config and loads the weights.
    pub fn to_model(&self) -> Result<Model> {
        let model = self.config.build(&mut seeded(0))?;
        model.load_snapshot(&self.params)?;
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.write_inner(w).map_err(fmt_err)
    }

    fn write_inner<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let config = serde_json::to_vec(&self.config)?;
        w.write_u32::<LittleEndian>(config.len() as u32)?;
        w.write_all(&config)?;
        w.write_u64::<LittleEndian>(self.meta.epoch as u64)?;
        w.write_f64::<LittleEndian>(self.meta.metric)?;
        w.write_u8(u8::from(self.meta.fold.is_some()))?;
        w.write_u64::<LittleEndian>(self.meta.fold.unwrap_or(0) as u64)?;

        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for p in &self.params {
            w.write_u32::<LittleEndian>(p.name.len() as u32)?;
            w.write_all(p.name.as_bytes())?;
            w.write_u32::<LittleEndian>(p.shape.len() as u32)?;
            for &d in &p.shape {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            write_f64s(w, &p.data)?;
        }

        match &self.adam {
            None => w.write_u8(0)?,
            Some(st) => {
                w.write_u8(1)?;
                w.write_u64::<LittleEndian>(st.step_count())?;
                for x in [st.lr, st.beta1, st.beta2, st.eps] {
                    w.write_f64::<LittleEndian>(x)?;
                }
                for buf in st.first_moments().iter().chain(st.second_moments()) {
                    write_f64s(w, buf)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt_err)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt_err)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let len = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(fmt_err)?;
        let config: ModelConfig = serde_json::from_slice(&json)?;
        let epoch = r.read_u64::<LittleEndian>().map_err(fmt_err)? as usize;
        let metric = r.read_f64::<LittleEndian>().map_err(fmt_err)?;
        let has_fold = r.read_u8().map_err(fmt_err)? != 0;
        let fold = r.read_u64::<LittleEndian>().map_err(fmt_err)? as usize;

        let count = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name).map_err(fmt_err)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let rank = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(fmt_err)?;
            let data = read_f64s(r, shape.iter().product())?;
            params.push(NamedArray { name, shape, data });
        }

        let adam = match r.read_u8().map_err(fmt_err)? {
            0 => None,
            _ => {
                let t = r.read_u64::<LittleEndian>().map_err(fmt_err)?;
                let mut hyper = [0.0; 4];
                for h in &mut hyper {
                    *h = r.read_f64::<LittleEndian>().map_err(fmt_err)?;
                }
                let lens: Vec<usize> = params.iter().map(|p| p.data.len()).collect();
                let m = lens.iter().map(|&n| read_f64s(r, n)).collect::<Result<Vec<_>>>()?;
                let v = lens.iter().map(|&n| read_f64s(r, n)).collect::<Result<Vec<_>>>()?;
                Some(AdamState::from_parts(hyper[0], hyper[1], hyper[2], hyper[3], t, m, v)?)
            }
        };

        Ok(Checkpoint {
            config,
            meta: CheckpointMeta {
                epoch,
                metric,
                fold: has_fold.then_some(fold),
            },
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

fn write_f64s<W: Write>(w: &mut W, data: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for &x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(fmt_err)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
