//! Wire formats and the mock attestation handshake.
//!
//! SealedFile:   nonce(12) ‖ ciphertext ‖ tag(16)
//! ChannelFrame: seq(8, big-endian) ‖ nonce(12) ‖ ciphertext ‖ tag(16), AAD = seq bytes

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

use super::Measurement;

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const SEQ_LEN: usize = 8;
pub const FRAME_HEADER_LEN: usize = SEQ_LEN + NONCE_LEN;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("integrity check failed")]
    Integrity,
    #[error("replayed or reordered frame: seq {seq} <= last accepted {last}")]
    Replay { seq: u64, last: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AttestationError {
    #[error("attestation failed: unexpected-measurement")]
    UnexpectedMeasurement,
    #[error("attestation failed: bad-mac")]
    BadMac,
}

impl AttestationError {
    pub fn code(self) -> &'static str {
        match self {
            AttestationError::UnexpectedMeasurement => "unexpected-measurement",
            AttestationError::BadMac => "bad-mac",
        }
    }
}

fn hmac(key: &[u8], parts: &[&[u8]]) -> HmacSha256 {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac
}

/// Per-path file key: keyed hash of the path under the master key.
pub fn file_key(master_key: &[u8; 32], path: &str) -> [u8; 32] {
    hmac(master_key, &[path.as_bytes()]).finalize().into_bytes().into()
}

fn cipher(key: &[u8; 32]) -> ChaCha20Poly1305 {
    ChaCha20Poly1305::new(Key::from_slice(key))
}

pub fn seal(key: &[u8; 32], nonce: [u8; NONCE_LEN], plaintext: &[u8]) -> Vec<u8> {
    let body = cipher(key)
        .encrypt(Nonce::from_slice(&nonce), plaintext)
        .expect("encryption of in-memory buffers cannot fail");
    let mut out = Vec::with_capacity(NONCE_LEN + body.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&body);
    out
}

pub fn unseal(key: &[u8; 32], sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < NONCE_LEN + TAG_LEN {
        return Err(CryptoError::Integrity);
    }
    let (nonce, body) = sealed.split_at(NONCE_LEN);
    cipher(key).decrypt(Nonce::from_slice(nonce), body).map_err(|_| CryptoError::Integrity)
}

/// Keys for one endpoint of an attested channel.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKeys {
    pub send: [u8; 32],
    pub recv: [u8; 32],
}

impl std::fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SessionKeys { .. }")
    }
}

fn derive_direction(psk: &[u8; 32], nonce_i: &[u8; 32], nonce_r: &[u8; 32], label: &[u8]) -> [u8; 32] {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(nonce_i);
    salt[32..].copy_from_slice(nonce_r);
    let hk = Hkdf::<Sha256>::new(Some(&salt), psk);
    let mut okm = [0u8; 32];
    hk.expand(label, &mut okm).expect("32 bytes is a valid hkdf length");
    okm
}

pub fn session_keys(psk: &[u8; 32], nonce_i: &[u8; 32], nonce_r: &[u8; 32], initiator: bool) -> SessionKeys {
    let i2r = derive_direction(psk, nonce_i, nonce_r, b"i2r");
    let r2i = derive_direction(psk, nonce_i, nonce_r, b"r2i");
    if initiator {
        SessionKeys { send: i2r, recv: r2i }
    } else {
        SessionKeys { send: r2i, recv: i2r }
    }
}

/// Responder's attestation evidence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evidence {
    pub measurement: Measurement,
    pub nonce_r: [u8; 32],
    pub mac: [u8; 32],
}

pub fn respond(measurement: Measurement, psk: &[u8; 32], nonce_i: &[u8; 32], nonce_r: [u8; 32]) -> Evidence {
    let mac = hmac(psk, &[&measurement.0, nonce_i, &nonce_r]).finalize().into_bytes().into();
    Evidence { measurement, nonce_r, mac }
}

/// Initiator side: the MAC is checked before the measurement is trusted.
pub fn verify(
    evidence: &Evidence,
    psk: &[u8; 32],
    nonce_i: &[u8; 32],
    expected: &std::collections::BTreeSet<Measurement>,
) -> Result<(), AttestationError> {
    hmac(psk, &[&evidence.measurement.0, nonce_i, &evidence.nonce_r])
        .verify_slice(&evidence.mac)
        .map_err(|_| AttestationError::BadMac)?;
    if !expected.contains(&evidence.measurement) {
        return Err(AttestationError::UnexpectedMeasurement);
    }
    Ok(())
}

/// One endpoint of a two-party channel; each direction is sequenced independently.
#[derive(Debug, Clone)]
pub struct SecureChannel {
    keys: SessionKeys,
    next_send: u64,
    last_recv: Option<u64>,
}

impl SecureChannel {
    pub fn new(keys: SessionKeys) -> Self {
        SecureChannel { keys, next_send: 0, last_recv: None }
    }

    pub fn keys(&self) -> &SessionKeys {
        &self.keys
    }

    pub fn next_seq(&self) -> u64 {
        self.next_send
    }

    pub fn send(&mut self, payload: &[u8]) -> Vec<u8> {
        let seq = self.next_send;
        self.next_send += 1;
        encode_frame(&self.keys.send, seq, payload)
    }

    pub fn recv(&mut self, frame: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let (seq, payload) = decode_frame(&self.keys.recv, frame)?;
        if let Some(last) = self.last_recv {
            if seq <= last {
                return Err(CryptoError::Replay { seq, last });
            }
        }
        self.last_recv = Some(seq);
        Ok(payload)
    }
}

pub fn frame_nonce(seq: u64) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[4..].copy_from_slice(&seq.to_be_bytes());
    n
}

pub fn encode_frame(key: &[u8; 32], seq: u64, payload: &[u8]) -> Vec<u8> {
    let seq_bytes = seq.to_be_bytes();
    let nonce = frame_nonce(seq);
    let body = cipher(key)
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: payload, aad: &seq_bytes })
        .expect("encryption of in-memory buffers cannot fail");
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
    out.extend_from_slice(&seq_bytes);
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&body);
    out
}

/// Authenticate and decrypt a frame; returns its sequence number and payload.
pub fn decode_frame(key: &[u8; 32], frame: &[u8]) -> Result<(u64, Vec<u8>), CryptoError> {
    if frame.len() < FRAME_HEADER_LEN + TAG_LEN {
        return Err(CryptoError::Integrity);
    }
    let (seq_bytes, rest) = frame.split_at(SEQ_LEN);
    let (nonce, body) = rest.split_at(NONCE_LEN);
    let payload = cipher(key)
        .decrypt(Nonce::from_slice(nonce), Payload { msg: body, aad: seq_bytes })
        .map_err(|_| CryptoError::Integrity)?;
    let seq = u64::from_be_bytes(seq_bytes.try_into().expect("split at SEQ_LEN"));
    Ok((seq, payload))
}
