//! Binary network checkpoints.
//!
//! Layout (little-endian): `SFCK`, version `u32`, task `u8`, mode `u8`,
//! tuned `u8`, synapse flag `u8` + tau `f32`, input rank `u32` + dims,
//! layer count `u32`, then per layer the kind code and its `u32` fields,
//! the neuron code, six `f32` neuron parameters and, for layers with
//! weights, the weight and bias blobs as `u32` length + `f32` values.
//! ANN and SNN networks share the format; the mode is a tag.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, Reader};
use crate::graph::{Layer, LayerKind, Mode, Network, Task};
use crate::neuron::{NeuronKind, NeuronParams};
use crate::tensor::{Padding, Tensor};

const MAGIC: &[u8; 4] = b"SFCK";
const VERSION: u32 = 1;

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(format!("checkpoint: {}", msg.into())))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    put_u32(out, v.len());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn neuron_code(n: NeuronKind) -> u8 {
    match n {
        NeuronKind::SoftLif => 0,
        NeuronKind::Lif => 1,
        NeuronKind::Relu => 2,
        NeuronKind::SpikingRelu => 3,
        NeuronKind::Linear => 4,
    }
}

fn neuron_from(c: u8) -> Result<NeuronKind> {
    Ok(match c {
        0 => NeuronKind::SoftLif,
        1 => NeuronKind::Lif,
        2 => NeuronKind::Relu,
        3 => NeuronKind::SpikingRelu,
        4 => NeuronKind::Linear,
        _ => return bad(format!("unknown neuron code {c}")),
    })
}

pub fn encode(net: &Network<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    out.push(match net.task {
        Task::Locnet => 0,
        Task::Cae => 1,
    });
    out.push(match net.mode {
        Mode::Ann => 0,
        Mode::Snn => 1,
    });
    out.push(net.tuned as u8);
    out.push(net.synapse.is_some() as u8);
    out.extend_from_slice(&net.synapse.unwrap_or(0.0).to_le_bytes());
    put_u32(&mut out, net.input_shape.len());
    for &d in &net.input_shape {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, net.layers.len());
    for l in &net.layers {
        match l.kind {
            LayerKind::Conv { out_channels, kernel, stride, padding } => {
                out.push(0);
                for v in [out_channels, kernel, stride] {
                    put_u32(&mut out, v);
                }
                out.push(match padding {
                    Padding::Same => 0,
                    Padding::Valid => 1,
                });
            }
            LayerKind::PoolConv { out_channels, kernel, stride } => {
                out.push(1);
                for v in [out_channels, kernel, stride] {
                    put_u32(&mut out, v);
                }
            }
            LayerKind::AvgPool { window } => {
                out.push(2);
                put_u32(&mut out, window);
            }
            LayerKind::Deconv { out_channels, kernel, stride } => {
                out.push(3);
                for v in [out_channels, kernel, stride] {
                    put_u32(&mut out, v);
                }
            }
            LayerKind::Dense { units } => {
                out.push(4);
                put_u32(&mut out, units);
            }
        }
        out.push(neuron_code(l.neuron));
        let p = &l.params;
        for v in [p.tau_rc, p.tau_ref, p.v_th, p.gamma, p.amplitude, p.scale] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match (&l.weight, &l.bias) {
            (Some(w), Some(b)) => {
                out.push(1);
                put_f32s(&mut out, w.data());
                put_f32s(&mut out, b.data());
            }
            _ => out.push(0),
        }
    }
    out
}

fn dim(r: &mut Reader) -> Result<usize> {
    let v = r.u32()? as usize;
    if v == 0 || v > 1 << 24 {
        return bad(format!("implausible size {v}"));
    }
    Ok(v)
}

fn blob(r: &mut Reader, shape: &[usize]) -> Result<Tensor<f32>> {
    let n = r.u32()? as usize;
    if n != shape.iter().product::<usize>() {
        return bad(format!("blob of {n} values for shape {shape:?}"));
    }
    let bytes = r.bytes(n * 4)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn decode(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.bytes(4)? != MAGIC {
        return bad("bad magic, not a checkpoint file");
    }
    let version = r.u32()?;
    if version != VERSION {
        return bad(format!("unsupported version {version}"));
    }
    let task = match r.u8()? {
        0 => Task::Locnet,
        1 => Task::Cae,
        c => return bad(format!("unknown task code {c}")),
    };
    let mode = match r.u8()? {
        0 => Mode::Ann,
        1 => Mode::Snn,
        c => return bad(format!("unknown mode code {c}")),
    };
    let tuned = r.u8()? != 0;
    let has_syn = r.u8()? != 0;
    let tau = r.f32()?;
    let synapse = has_syn.then_some(tau);
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 4 {
        return bad(format!("input rank {rank}"));
    }
    let input_shape = (0..rank).map(|_| dim(&mut r)).collect::<Result<Vec<_>>>()?;
    let n_layers = r.u32()? as usize;
    if n_layers == 0 || n_layers > 1024 {
        return bad(format!("{n_layers} layers"));
    }
    let mut shape = input_shape.clone();
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = match r.u8()? {
            0 => {
                let (out_channels, kernel, stride) = (dim(&mut r)?, dim(&mut r)?, dim(&mut r)?);
                let padding = match r.u8()? {
                    0 => Padding::Same,
                    1 => Padding::Valid,
                    c => return bad(format!("unknown padding code {c}")),
                };
                LayerKind::Conv { out_channels, kernel, stride, padding }
            }
            1 => LayerKind::PoolConv { out_channels: dim(&mut r)?, kernel: dim(&mut r)?, stride: dim(&mut r)? },
            2 => LayerKind::AvgPool { window: dim(&mut r)? },
            3 => LayerKind::Deconv { out_channels: dim(&mut r)?, kernel: dim(&mut r)?, stride: dim(&mut r)? },
            4 => LayerKind::Dense { units: dim(&mut r)? },
            c => return bad(format!("unknown layer code {c}")),
        };
        let neuron = neuron_from(r.u8()?)?;
        let params = NeuronParams {
            tau_rc: r.f32()?,
            tau_ref: r.f32()?,
            v_th: r.f32()?,
            gamma: r.f32()?,
            amplitude: r.f32()?,
            scale: r.f32()?,
        };
        let out_shape = kind.output_shape(&shape)?;
        let (weight, bias) = match (r.u8()?, kind.param_shapes(&shape)) {
            (1, Some((ws, bs))) => (Some(blob(&mut r, &ws)?), Some(blob(&mut r, &bs)?)),
            (0, None) => (None, None),
            _ => return bad(format!("weight presence does not match {kind:?}")),
        };
        layers.push(Layer { kind, neuron, params, in_shape: shape, out_shape: out_shape.clone(), weight, bias });
        shape = out_shape;
    }
    r.finish()?;
    let net = Network { task, input_shape, layers, mode, synapse, tuned };
    net.validate()?;
    Ok(net)
}

pub fn save(path: &Path, net: &Network<f32>) -> Result<()> {
    write_atomic(path, &encode(net))
}

pub fn load(path: &Path) -> Result<Network<f32>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_cae, build_locnet, CaePlan, LocNetPlan};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = LocNetPlan { channels: vec![2, 3, 4], dense: vec![8, 4], lif_bias: 1.0 };
        let p = NeuronParams::default().with_amplitude(0.01);
        let ann = build_locnet(&[1, 16, 16], &plan, p, &mut rng).unwrap();
        let mut snn = crate::train::convert(&ann).unwrap();
        snn.tuned = true;
        let cae = build_cae(&[1, 8, 8], &CaePlan { channels: vec![2] }, NeuronParams::default().with_scale(1000.0), &mut rng).unwrap();
        for net in [ann, snn, cae] {
            let back = decode(&encode(&net)).unwrap();
            assert_eq!(back, net);
            assert_eq!(encode(&back), encode(&net));
        }
    }

    #[test]
    fn rejects_damage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = build_cae(&[1, 8, 8], &CaePlan { channels: vec![2] }, NeuronParams::default(), &mut rng).unwrap();
        let bytes = encode(&net);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        assert!(decode(&ver).is_err());
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sfck");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = build_cae(&[1, 8, 8], &CaePlan { channels: vec![2] }, NeuronParams::default(), &mut rng).unwrap();
        save(&path, &net).unwrap();
        assert_eq!(load(&path).unwrap(), net);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
