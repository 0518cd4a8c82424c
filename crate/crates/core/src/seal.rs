//! Sealed model container (`.dtzs`): plaintext prefix layers plus an
//! AEAD-protected suffix.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic         "DTZS"
//! version       u32 (currently 1)
//! boundary      u32            l: layers 1..=l are plaintext prefix
//! prefix count  u32            trainable prefix layer records
//! per prefix record: layer index u32, weight count u64, bias count u64,
//!                    weights f32*, biases f32*
//! sealed count  u32            one record per suffix layer l+1..=L
//! per sealed record: layer index u32, weight count u64, bias count u64,
//!                    nonce [12]B, ciphertext (4*(wc+bc))B, tag [16]B
//! ```
//!
//! Each sealed record's plaintext is `weights || biases` as little-endian
//! floats, encrypted with AES-GCM-128 under a fresh random 96-bit nonce.
//! The associated data is the 12-byte file header concatenated with the
//! record's expected (position-derived) layer index, so records cannot be
//! transplanted between files or reordered without failing authentication.
//! Nonces must be unique within a file; trailing bytes are rejected.

use std::collections::HashSet;

use aes_gcm::aead::{Aead, AeadCore, KeyInit, OsRng, Payload};
use aes_gcm::{Aes128Gcm, Nonce};

use crate::bytes::{push_f32s, push_u32, push_u64, ByteReader};
use crate::error::{Error, Result};
use crate::net::Network;

pub const SEALED_MAGIC: [u8; 4] = *b"DTZS";
pub const SEALED_VERSION: u32 = 1;
pub const KEY_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

/// Plaintext parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub layer_index: usize,
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
}

#[derive(Debug, Clone)]
struct SealedRecord {
    layer_index: u32,
    weight_count: u64,
    bias_count: u64,
    nonce: [u8; NONCE_LEN],
    ciphertext: Vec<u8>,
    tag: [u8; TAG_LEN],
}

/// Parsed sealed-model container.
#[derive(Debug, Clone)]
pub struct SealedContainer {
    boundary: usize,
    prefix: Vec<ParamRecord>,
    sealed: Vec<SealedRecord>,
}

fn header_bytes(boundary: usize) -> [u8; 12] {
    let mut h = [0u8; 12];
    h[..4].copy_from_slice(&SEALED_MAGIC);
    h[4..8].copy_from_slice(&SEALED_VERSION.to_le_bytes());
    h[8..12].copy_from_slice(&(boundary as u32).to_le_bytes());
    h
}

fn record_aad(boundary: usize, layer_index: usize) -> [u8; 16] {
    let mut aad = [0u8; 16];
    aad[..12].copy_from_slice(&header_bytes(boundary));
    aad[12..].copy_from_slice(&(layer_index as u32).to_le_bytes());
    aad
}

fn param_bytes(weights: &[f32], biases: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity((weights.len() + biases.len()) * 4);
    push_f32s(&mut out, weights);
    push_f32s(&mut out, biases);
    out
}

impl SealedContainer {
    /// Boundary l: layers `1..=l` are plaintext, `l+1..=l+sealed_count`
    /// sealed.
    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn last_layer_index(&self) -> usize {
        self.boundary + self.sealed.len()
    }

    pub fn prefix(&self) -> &[ParamRecord] {
        &self.prefix
    }

    pub fn sealed_count(&self) -> usize {
        self.sealed.len()
    }

    /// Replace the plaintext prefix records (the sealed suffix and header
    /// are untouched, so suffix authentication is unaffected).
    pub fn set_prefix(&mut self, prefix: Vec<ParamRecord>) {
        self.prefix = prefix;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&header_bytes(self.boundary));
        push_u32(&mut out, self.prefix.len() as u32);
        for p in &self.prefix {
            push_u32(&mut out, p.layer_index as u32);
            push_u64(&mut out, p.weights.len() as u64);
            push_u64(&mut out, p.biases.len() as u64);
            push_f32s(&mut out, &p.weights);
            push_f32s(&mut out, &p.biases);
        }
        push_u32(&mut out, self.sealed.len() as u32);
        for s in &self.sealed {
            push_u32(&mut out, s.layer_index);
            push_u64(&mut out, s.weight_count);
            push_u64(&mut out, s.bias_count);
            out.extend_from_slice(&s.nonce);
            out.extend_from_slice(&s.ciphertext);
            out.extend_from_slice(&s.tag);
        }
        out
    }

    /// Structural parse: format checks plus nonce-uniqueness; no key needed.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(SEALED_MAGIC)?;
        r.version(SEALED_VERSION)?;
        let boundary = r.u32("boundary")? as usize;
        let prefix_count = r.u32("prefix count")? as usize;
        let mut prefix = Vec::with_capacity(prefix_count);
        for i in 0..prefix_count {
            let layer_index = r.u32("prefix layer index")? as usize;
            if layer_index == 0 || layer_index > boundary {
                return Err(Error::Record {
                    index: i,
                    message: format!(
                        "prefix layer index {layer_index} outside 1..={boundary}"
                    ),
                });
            }
            let wc = r.u64("weight count")? as usize;
            let bc = r.u64("bias count")? as usize;
            prefix.push(ParamRecord {
                layer_index,
                weights: r.f32_vec(wc, "prefix weights")?,
                biases: r.f32_vec(bc, "prefix biases")?,
            });
        }
        let sealed_count = r.u32("sealed count")? as usize;
        let mut sealed = Vec::with_capacity(sealed_count);
        let mut nonces = HashSet::new();
        for _ in 0..sealed_count {
            let layer_index = r.u32("sealed layer index")?;
            let weight_count = r.u64("sealed weight count")?;
            let bias_count = r.u64("sealed bias count")?;
            let mut nonce = [0u8; NONCE_LEN];
            nonce.copy_from_slice(r.take(NONCE_LEN, "nonce")?);
            if !nonces.insert(nonce) {
                return Err(Error::DuplicateNonce);
            }
            let ct_len = (weight_count + bias_count) as usize * 4;
            let ciphertext = r.take(ct_len, "ciphertext")?.to_vec();
            let mut tag = [0u8; TAG_LEN];
            tag.copy_from_slice(r.take(TAG_LEN, "tag")?);
            sealed.push(SealedRecord {
                layer_index,
                weight_count,
                bias_count,
                nonce,
                ciphertext,
                tag,
            });
        }
        r.finish()?;
        Ok(SealedContainer {
            boundary,
            prefix,
            sealed,
        })
    }

    /// Authenticate and decrypt every sealed record. Returns the suffix
    /// parameters in layer order, or fails without emitting any plaintext.
    pub fn unseal(&self, key: &[u8; KEY_LEN]) -> Result<Vec<ParamRecord>> {
        let cipher = Aes128Gcm::new(key.into());
        let mut out = Vec::with_capacity(self.sealed.len());
        for (pos, rec) in self.sealed.iter().enumerate() {
            let expected_index = self.boundary + 1 + pos;
            let aad = record_aad(self.boundary, expected_index);
            let mut msg = Vec::with_capacity(rec.ciphertext.len() + TAG_LEN);
            msg.extend_from_slice(&rec.ciphertext);
            msg.extend_from_slice(&rec.tag);
            let plaintext = cipher
                .decrypt(
                    Nonce::from_slice(&rec.nonce),
                    Payload {
                        msg: &msg,
                        aad: &aad,
                    },
                )
                .map_err(|_| Error::Auth)?;
            if rec.layer_index as usize != expected_index {
                // Unreachable for files produced by `seal_layers` (the AAD
                // already pins the position); rejects a forged index field.
                return Err(Error::Record {
                    index: pos,
                    message: format!(
                        "sealed record claims layer {}, expected {expected_index}",
                        rec.layer_index
                    ),
                });
            }
            let wc = rec.weight_count as usize;
            let weights = plaintext[..wc * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let biases = plaintext[wc * 4..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            out.push(ParamRecord {
                layer_index: expected_index,
                weights,
                biases,
            });
        }
        Ok(out)
    }
}

fn fresh_nonce(used: &mut HashSet<[u8; NONCE_LEN]>) -> [u8; NONCE_LEN] {
    loop {
        let nonce = Aes128Gcm::generate_nonce(&mut OsRng);
        let mut n = [0u8; NONCE_LEN];
        n.copy_from_slice(&nonce);
        if used.insert(n) {
            return n;
        }
    }
}

fn seal_fragment(
    suffix: &Network,
    boundary: usize,
    key: &[u8; KEY_LEN],
    prefix: Vec<ParamRecord>,
) -> Result<SealedContainer> {
    let cipher = Aes128Gcm::new(key.into());
    let mut used_nonces = HashSet::new();
    let mut sealed = Vec::new();
    for idx in (boundary + 1)..=(suffix.index_base() + suffix.layer_count()) {
        let layer = suffix.layer(idx)?;
        let nonce = fresh_nonce(&mut used_nonces);
        let aad = record_aad(boundary, idx);
        let plaintext = param_bytes(layer.weights().data(), layer.biases().data());
        let ct_and_tag = cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: &plaintext,
                    aad: &aad,
                },
            )
            .map_err(|_| Error::Auth)?;
        let split = ct_and_tag.len() - TAG_LEN;
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(&ct_and_tag[split..]);
        sealed.push(SealedRecord {
            layer_index: idx as u32,
            weight_count: layer.weights().count() as u64,
            bias_count: layer.biases().count() as u64,
            nonce,
            ciphertext: ct_and_tag[..split].to_vec(),
            tag,
        });
    }
    Ok(SealedContainer {
        boundary,
        prefix,
        sealed,
    })
}

/// Collect plaintext records for the trainable layers `1..=boundary`.
pub fn prefix_records(net: &Network, boundary: usize) -> Result<Vec<ParamRecord>> {
    let mut prefix = Vec::new();
    for idx in (net.index_base() + 1)..=boundary.min(net.index_base() + net.layer_count()) {
        let layer = net.layer(idx)?;
        if layer.is_trainable() {
            prefix.push(ParamRecord {
                layer_index: idx,
                weights: layer.weights().data().to_vec(),
                biases: layer.biases().data().to_vec(),
            });
        }
    }
    Ok(prefix)
}

/// Seal layers `boundary+1..=L` of `net` under `key`, keeping `1..=boundary`
/// as a plaintext prefix. `boundary == L` is a contract violation (nothing
/// to seal).
pub fn seal_layers(
    net: &Network,
    boundary: usize,
    key: &[u8; KEY_LEN],
) -> Result<SealedContainer> {
    let l = net.layer_count() + net.index_base();
    if boundary >= l {
        return Err(Error::contract(format!(
            "boundary {boundary} leaves nothing to seal in a {l}-layer network"
        )));
    }
    let prefix = prefix_records(net, boundary)?;
    seal_fragment(net, boundary, key, prefix)
}

/// Seal a trusted-side fragment (layers `boundary+1..=L` only) with an
/// empty prefix; the rich side splices its own prefix before writing.
pub fn seal_suffix_only(
    fragment: &Network,
    boundary: usize,
    key: &[u8; KEY_LEN],
) -> Result<SealedContainer> {
    if fragment.index_base() != boundary {
        return Err(Error::contract(format!(
            "fragment starts at layer {}, expected boundary {boundary}",
            fragment.index_base() + 1
        )));
    }
    if fragment.layer_count() == 0 {
        return Err(Error::contract("nothing to seal"));
    }
    seal_fragment(fragment, boundary, key, Vec::new())
}

/// Read a raw 16-byte key file.
pub fn read_key_file(path: &std::path::Path) -> Result<[u8; KEY_LEN]> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != KEY_LEN {
        return Err(Error::KeyLength(bytes.len()));
    }
    let mut key = [0u8; KEY_LEN];
    key.copy_from_slice(&bytes);
    Ok(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::parse_cfg;

    fn net() -> Network {
        let mut n = parse_cfg(
            "[net]\nheight=6\nwidth=6\nchannels=1\nclasses=3\nseed=21\n\
             [convolutional]\nfilters=2\nsize=3\nactivation=relu\n\
             [maxpool]\nsize=2\nstride=2\n\
             [connected]\noutput=3\n[softmax]\n[cost]\n",
        )
        .unwrap();
        n.init_weights();
        n
    }

    const KEY: [u8; 16] = [7u8; 16];

    #[test]
    fn seal_unseal_round_trip_bit_exact() {
        let n = net();
        let container = seal_layers(&n, 2, &KEY).unwrap();
        let bytes = container.to_bytes();
        let parsed = SealedContainer::parse(&bytes).unwrap();
        assert_eq!(parsed.boundary(), 2);
        assert_eq!(parsed.sealed_count(), 3);
        let records = parsed.unseal(&KEY).unwrap();
        assert_eq!(records.len(), 3);
        let fc = records.iter().find(|r| r.layer_index == 3).unwrap();
        assert_eq!(fc.weights, n.layer(3).unwrap().weights().data());
        assert_eq!(fc.biases, n.layer(3).unwrap().biases().data());
        // non-trainable suffix layers carry empty parameter sets
        let sm = records.iter().find(|r| r.layer_index == 4).unwrap();
        assert!(sm.weights.is_empty() && sm.biases.is_empty());
    }

    #[test]
    fn boundary_equal_layer_count_is_contract_violation() {
        let n = net();
        let err = seal_layers(&n, 5, &KEY).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn ciphertext_flip_fails_authentication() {
        let n = net();
        let mut bytes = seal_layers(&n, 2, &KEY).unwrap().to_bytes();
        let parsed = SealedContainer::parse(&bytes).unwrap();
        assert!(parsed.unseal(&KEY).is_ok());
        // First ciphertext byte: header 12, prefix count 4, one conv prefix
        // record 4+8+8+(18+2)*4, sealed count 4, record head 4+8+8, nonce.
        let ct_start = 12 + 4 + (4 + 8 + 8 + 20 * 4) + 4 + (4 + 8 + 8) + NONCE_LEN;
        bytes[ct_start] ^= 0x01;
        let tampered = SealedContainer::parse(&bytes).unwrap();
        assert!(matches!(tampered.unseal(&KEY).unwrap_err(), Error::Auth));
    }

    #[test]
    fn record_swap_fails_authentication() {
        // boundary 3: {softmax, cost} sealed as records of identical size.
        let n = net();
        let container = seal_layers(&n, 3, &KEY).unwrap();
        let mut swapped = container.clone();
        swapped.sealed.swap(0, 1);
        let bytes = swapped.to_bytes();
        let parsed = SealedContainer::parse(&bytes).unwrap();
        assert!(matches!(parsed.unseal(&KEY).unwrap_err(), Error::Auth));
    }

    #[test]
    fn wrong_key_fails_without_plaintext() {
        let n = net();
        let container = seal_layers(&n, 2, &KEY).unwrap();
        let bad = [8u8; 16];
        assert!(matches!(container.unseal(&bad).unwrap_err(), Error::Auth));
    }

    #[test]
    fn duplicate_nonce_detected_on_parse() {
        let n = net();
        let mut container = seal_layers(&n, 2, &KEY).unwrap();
        let nonce = container.sealed[0].nonce;
        container.sealed[1].nonce = nonce;
        let bytes = container.to_bytes();
        assert!(matches!(
            SealedContainer::parse(&bytes).unwrap_err(),
            Error::DuplicateNonce
        ));
    }

    #[test]
    fn trailing_garbage_rejected() {
        let n = net();
        let mut bytes = seal_layers(&n, 2, &KEY).unwrap().to_bytes();
        bytes.extend_from_slice(&[0, 1, 2]);
        assert!(matches!(
            SealedContainer::parse(&bytes).unwrap_err(),
            Error::TrailingBytes(3)
        ));
    }

    #[test]
    fn ciphertext_shares_no_plaintext_block() {
        // Confidentiality sanity proxy on a few random nets.
        for seed in [1u64, 2, 3] {
            let mut n = parse_cfg(&format!(
                "[net]\nheight=4\nwidth=4\nchannels=1\nclasses=4\nseed={seed}\n\
                 [connected]\noutput=16\nactivation=relu\n\
                 [connected]\noutput=4\n[softmax]\n[cost]\n"
            ))
            .unwrap();
            n.init_weights();
            let container = seal_layers(&n, 1, &KEY).unwrap();
            let fc = n.layer(2).unwrap();
            let plain = param_bytes(fc.weights().data(), fc.biases().data());
            let windows: std::collections::HashSet<&[u8]> =
                plain.windows(16).collect();
            let ct = &container.sealed[0].ciphertext;
            for block in ct.chunks_exact(16) {
                assert!(!windows.contains(block));
            }
        }
    }

    #[test]
    fn splice_prefix_keeps_suffix_valid() {
        let mut n = net();
        let mut container = seal_layers(&n, 2, &KEY).unwrap();
        // rich side trains its prefix further, then replaces the records
        n.layer_mut(1)
            .unwrap()
            .weights_mut_for_probe()
            .iter_mut()
            .for_each(|w| *w += 1.0);
        container.set_prefix(prefix_records(&n, 2).unwrap());
        let reparsed = SealedContainer::parse(&container.to_bytes()).unwrap();
        assert!(reparsed.unseal(&KEY).is_ok());
        assert_eq!(
            reparsed.prefix()[0].weights,
            n.layer(1).unwrap().weights().data()
        );
    }
}
