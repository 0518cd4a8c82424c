//! Binary weights container (`.dtzw`).
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        "DTZW"
//! version      u32 (currently 1)
//! layer count  u32            number of trainable-layer records
//! per record:
//!   layer index  u32          1-based position in the network
//!   weight count u64
//!   bias count   u64
//!   weights      f32 * weight count
//!   biases       f32 * bias count
//! ```
//!
//! Records appear in ascending layer order and cover exactly the trainable
//! layers of the paired network. Trailing bytes are rejected.

use std::io::{Read, Write};

use crate::bytes::{push_f32s, push_u32, push_u64, ByteReader};
use crate::error::{Error, Result};
use crate::net::Network;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"DTZW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Serialize the trainable parameters of `net`.
pub fn weights_to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    push_u32(&mut out, WEIGHTS_VERSION);
    let trainable: Vec<usize> = net
        .layer_indices()
        .filter(|&i| net.layer(i).unwrap().is_trainable())
        .collect();
    push_u32(&mut out, trainable.len() as u32);
    for idx in trainable {
        let layer = net.layer(idx).unwrap();
        push_u32(&mut out, idx as u32);
        push_u64(&mut out, layer.weights().count() as u64);
        push_u64(&mut out, layer.biases().count() as u64);
        push_f32s(&mut out, layer.weights().data());
        push_f32s(&mut out, layer.biases().data());
    }
    out
}

pub fn save_weights(net: &Network, sink: &mut dyn Write) -> Result<()> {
    sink.write_all(&weights_to_bytes(net))?;
    Ok(())
}

/// Load parameters into `net` from a weights byte buffer. The record set
/// must match the network's trainable layers exactly.
pub fn weights_from_bytes(net: &mut Network, bytes: &[u8]) -> Result<()> {
    let mut r = ByteReader::new(bytes);
    r.magic(WEIGHTS_MAGIC)?;
    r.version(WEIGHTS_VERSION)?;
    let count = r.u32("layer count")? as usize;
    let expected: Vec<usize> = net
        .layer_indices()
        .filter(|&i| net.layer(i).unwrap().is_trainable())
        .collect();
    if count != expected.len() {
        return Err(Error::CountMismatch(format!(
            "file has {count} trainable layer record(s), network has {}",
            expected.len()
        )));
    }
    for (record, &idx) in expected.iter().enumerate() {
        let file_idx = r.u32("layer index")? as usize;
        if file_idx != idx {
            return Err(Error::Record {
                index: record,
                message: format!("layer index {file_idx}, expected {idx}"),
            });
        }
        let wc = r.u64("weight count")? as usize;
        let bc = r.u64("bias count")? as usize;
        let layer = net.layer(idx)?;
        if wc != layer.weights().count() || bc != layer.biases().count() {
            return Err(Error::CountMismatch(format!(
                "layer {idx} expects {}+{} parameters, file has {wc}+{bc}",
                layer.weights().count(),
                layer.biases().count()
            )));
        }
        let weights = r.f32_vec(wc, "weights")?;
        let biases = r.f32_vec(bc, "biases")?;
        net.layer_mut(idx)?.set_params(weights, biases)?;
    }
    r.finish()?;
    Ok(())
}

pub fn load_weights(net: &mut Network, source: &mut dyn Read) -> Result<()> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    weights_from_bytes(net, &bytes)
}
