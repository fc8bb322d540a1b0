//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `MLDOPARM`, version, node count, hidden
//! width, then per module `(kind, activation, in_dim, out_dim)`, then every
//! module's tensors as `f64` in declaration order. An optional Adam block
//! (step, hyperparameters, first and second moments) follows a presence flag.

use super::adam::AdamState;
use super::lstm::{LstmModuleParams, ModuleKind, OutputActivation};
use super::params::{MiLoDoParams, NodeModules};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::scalar::{cast_slice, Scalar};

const MAGIC: &[u8; 8] = b"MLDOPARM";
const VERSION: u32 = 1;

fn activation_tag(a: OutputActivation) -> u8 {
    match a {
        OutputActivation::Relu => 0,
        OutputActivation::Exp => 1,
    }
}

fn write_values<T: Scalar>(w: &mut ByteWriter, p: &MiLoDoParams<T>) {
    for m in p.modules() {
        w.f64s(&cast_slice::<T, f64>(m.as_slice()));
    }
}

fn read_values<T: Scalar>(r: &mut ByteReader<'_>, like: &MiLoDoParams<T>) -> Result<MiLoDoParams<T>> {
    let mut out = like.zeros_like();
    for m in out.modules_mut() {
        let vals = r.f64s(m.as_slice().len())?;
        m.as_mut_slice().copy_from_slice(&cast_slice::<f64, T>(&vals));
    }
    Ok(out)
}

pub fn encode_checkpoint<T: Scalar>(params: &MiLoDoParams<T>, adam: Option<&AdamState<T>>) -> Vec<u8> {
    let mut w = ByteWriter::new(MAGIC, VERSION);
    w.u64(params.n() as u64);
    w.u64(params.hidden() as u64);
    for node in params.nodes() {
        for k in ModuleKind::ALL {
            let m = node.get(k);
            w.u8(k.index() as u8);
            w.u8(activation_tag(m.activation()));
            w.u64(m.in_dim() as u64);
            w.u64(m.out_dim() as u64);
        }
    }
    write_values(&mut w, params);
    match adam {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.u64(s.t);
            w.f64s(&[s.lr, s.beta1, s.beta2, s.eps]);
            write_values(&mut w, &s.m);
            write_values(&mut w, &s.v);
        }
    }
    w.finish()
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(MiLoDoParams<T>, Option<AdamState<T>>)> {
    let mut r = ByteReader::new(bytes, MAGIC, VERSION)?;
    let n = r.usize()?;
    let hidden = r.usize()?;
    if n == 0 || hidden == 0 || n > bytes.len() {
        return Err(Error::Format(format!("implausible checkpoint header n={n}, hidden={hidden}")));
    }
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let mut mods = Vec::with_capacity(3);
        for k in ModuleKind::ALL {
            let (kind, act) = (r.u8()?, r.u8()?);
            let (in_dim, out_dim) = (r.usize()?, r.usize()?);
            if kind as usize != k.index() || act != activation_tag(k.activation()) {
                return Err(Error::Format(format!("node {i}: unexpected module header ({kind}, {act})")));
            }
            if in_dim > bytes.len() || out_dim > bytes.len() {
                return Err(Error::Format(format!("node {i}: implausible module dims")));
            }
            mods.push(LstmModuleParams::zeros(in_dim, hidden, out_dim, k.activation()));
        }
        let u = mods.pop().expect("three modules");
        let s = mods.pop().expect("three modules");
        let m = mods.pop().expect("three modules");
        nodes.push(NodeModules { m, s, u });
    }
    let skeleton = MiLoDoParams::from_nodes(nodes);
    let params = read_values(&mut r, &skeleton)?;
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let h = r.f64s(4)?;
            let m = read_values(&mut r, &skeleton)?;
            let v = read_values(&mut r, &skeleton)?;
            Some(AdamState { m, v, t, lr: h[0], beta1: h[1], beta2: h[2], eps: h[3] })
        }
        f => return Err(Error::Format(format!("bad adam flag {f}"))),
    };
    r.expect_end()?;
    Ok((params, adam))
}
