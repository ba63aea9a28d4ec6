//! Simulated secure-container envelope around one service instance.
//!
//! The envelope owns the program measurement, a master key for sealed files,
//! an EPC cost model installed into the interpreter, and an immutable
//! allowlist that gates every service call.

pub mod crypto;
pub mod epc;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ir::{serialize_canonical, ExecResult, Hooks, IRProgram, Limits, MemHook, ServiceGate, Word};
pub use crypto::{AttestationError, CryptoError, Evidence, SecureChannel, SessionKeys};
pub use epc::EpcModel;

/// SHA-256 of a program's canonical serialization.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Measurement(pub [u8; 32]);

impl Measurement {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, EnclaveError> {
        let bytes = hex::decode(s).map_err(|e| EnclaveError::Config(format!("measurement {s:?}: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| EnclaveError::Config(format!("measurement {s:?}: expected 32 bytes")))?;
        Ok(Measurement(arr))
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", self.to_hex())
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Measurement {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Measurement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Measurement::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn measure(p: &IRProgram) -> Measurement {
    Measurement(Sha256::digest(serialize_canonical(p)).into())
}

pub const SERVICE_CALLS: [&str; 5] = ["file_get", "file_put", "chan_send", "chan_recv", "out"];

fn default_allowlist() -> BTreeSet<String> {
    SERVICE_CALLS.iter().map(|s| s.to_string()).collect()
}

fn default_epc_pages() -> usize {
    epc::DEFAULT_EPC_PAGES
}

fn default_fault_penalty() -> u64 {
    epc::DEFAULT_FAULT_PENALTY
}

/// Envelope configuration as read from JSON. A missing allowlist means the
/// default service-call set; an explicit empty list denies everything.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeConfig {
    #[serde(default = "default_epc_pages")]
    pub epc_pages: usize,
    #[serde(default = "default_fault_penalty")]
    pub fault_penalty: u64,
    #[serde(default = "default_allowlist")]
    pub allowlist: BTreeSet<String>,
    #[serde(default)]
    pub expected_measurements: BTreeSet<Measurement>,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        EnvelopeConfig {
            epc_pages: default_epc_pages(),
            fault_penalty: default_fault_penalty(),
            allowlist: default_allowlist(),
            expected_measurements: BTreeSet::new(),
        }
    }
}

impl EnvelopeConfig {
    pub fn from_json(text: &str) -> Result<Self, EnclaveError> {
        serde_json::from_str(text).map_err(|e| EnclaveError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, EnclaveError> {
        let text = std::fs::read_to_string(path).map_err(|e| EnclaveError::Config(format!("{}: {e}", path.display())))?;
        EnvelopeConfig::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnclaveError {
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Attestation(#[from] AttestationError),
    #[error("service call {0:?} denied by allowlist")]
    Denied(String),
    #[error("file path must be nonempty")]
    EmptyPath,
    #[error("no sealed file at {0:?}")]
    NotFound(String),
    #[error("invalid envelope configuration: {0}")]
    Config(String),
}

/// Immutable set of permitted service calls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allowlist(BTreeSet<String>);

impl Allowlist {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(calls: I) -> Self {
        Allowlist(calls.into_iter().map(Into::into).collect())
    }

    pub fn contains(&self, call: &str) -> bool {
        self.0.contains(call)
    }
}

impl Default for Allowlist {
    fn default() -> Self {
        Allowlist(default_allowlist())
    }
}

impl ServiceGate for Allowlist {
    fn permit(&self, call: &str) -> bool {
        self.contains(call)
    }
}

pub struct EnclaveEnvelope {
    program: IRProgram,
    measurement: Measurement,
    master_key: [u8; 32],
    epc: EpcModel,
    allowlist: Allowlist,
    expected: BTreeSet<Measurement>,
    files: BTreeMap<String, Vec<u8>>,
    nonce_rng: ChaCha20Rng,
}

impl fmt::Debug for EnclaveEnvelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnclaveEnvelope")
            .field("measurement", &self.measurement)
            .field("allowlist", &self.allowlist)
            .field("files", &self.files.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl EnclaveEnvelope {
    /// `nonce_seed` drives sealing nonces so runs are reproducible.
    pub fn new(program: IRProgram, master_key: [u8; 32], config: &EnvelopeConfig, nonce_seed: u64) -> Self {
        let measurement = measure(&program);
        EnclaveEnvelope {
            program,
            measurement,
            master_key,
            epc: EpcModel::new(config.epc_pages, config.fault_penalty),
            allowlist: Allowlist(config.allowlist.clone()),
            expected: config.expected_measurements.clone(),
            files: BTreeMap::new(),
            nonce_rng: ChaCha20Rng::seed_from_u64(nonce_seed),
        }
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn program(&self) -> &IRProgram {
        &self.program
    }

    pub fn allowlist(&self) -> &Allowlist {
        &self.allowlist
    }

    pub fn expected_measurements(&self) -> &BTreeSet<Measurement> {
        &self.expected
    }

    pub fn epc(&self) -> &EpcModel {
        &self.epc
    }

    pub fn syscall_gate(&self, call: &str) -> bool {
        self.allowlist.contains(call)
    }

    fn require(&self, call: &str) -> Result<(), EnclaveError> {
        if self.syscall_gate(call) {
            Ok(())
        } else {
            Err(EnclaveError::Denied(call.to_string()))
        }
    }

    pub fn seal_file(&mut self, path: &str, plaintext: &[u8]) -> Result<Vec<u8>, EnclaveError> {
        if path.is_empty() {
            return Err(EnclaveError::EmptyPath);
        }
        let mut nonce = [0u8; crypto::NONCE_LEN];
        self.nonce_rng.fill_bytes(&mut nonce);
        Ok(crypto::seal(&crypto::file_key(&self.master_key, path), nonce, plaintext))
    }

    pub fn unseal_file(&self, path: &str, sealed: &[u8]) -> Result<Vec<u8>, EnclaveError> {
        if path.is_empty() {
            return Err(EnclaveError::EmptyPath);
        }
        Ok(crypto::unseal(&crypto::file_key(&self.master_key, path), sealed)?)
    }

    pub fn file_put(&mut self, path: &str, plaintext: &[u8]) -> Result<(), EnclaveError> {
        self.require("file_put")?;
        let sealed = self.seal_file(path, plaintext)?;
        self.files.insert(path.to_string(), sealed);
        Ok(())
    }

    pub fn file_get(&self, path: &str) -> Result<Vec<u8>, EnclaveError> {
        self.require("file_get")?;
        let sealed = self.files.get(path).ok_or_else(|| EnclaveError::NotFound(path.to_string()))?;
        self.unseal_file(path, sealed)
    }

    /// Sealed bytes as stored, i.e. what untrusted storage would see.
    pub fn stored(&self, path: &str) -> Option<&[u8]> {
        self.files.get(path).map(Vec::as_slice)
    }

    /// Replace stored bytes, modelling an attacker with access to storage.
    pub fn store_raw(&mut self, path: &str, bytes: Vec<u8>) {
        self.files.insert(path.to_string(), bytes);
    }

    pub fn chan_send(&self, chan: &mut SecureChannel, payload: &[u8]) -> Result<Vec<u8>, EnclaveError> {
        self.require("chan_send")?;
        Ok(chan.send(payload))
    }

    pub fn chan_recv(&self, chan: &mut SecureChannel, frame: &[u8]) -> Result<Vec<u8>, EnclaveError> {
        self.require("chan_recv")?;
        Ok(chan.recv(frame)?)
    }

    /// Run the enclosed program from a cold EPC with the allowlist as gate.
    pub fn execute(&mut self, input: &[Word], limits: Limits) -> ExecResult {
        self.execute_with(input, limits, None)
    }

    pub fn execute_with<'a>(
        &'a mut self,
        input: &[Word],
        limits: Limits,
        mem: Option<&'a mut dyn MemHook>,
    ) -> ExecResult {
        self.epc.reset();
        let mut hooks = Hooks { mem, cost: Some(&mut self.epc), gate: Some(&self.allowlist) };
        crate::ir::execute(&self.program, input, limits, &mut hooks)
    }
}

/// Mock attestation followed by channel setup. The responder proves its
/// measurement with a MAC under its copy of the pre-shared key; the
/// initiator accepts only a valid MAC over an expected measurement.
pub fn attest_handshake(
    initiator: &EnclaveEnvelope,
    responder: &EnclaveEnvelope,
    expected: &BTreeSet<Measurement>,
    psk_initiator: &[u8; 32],
    psk_responder: &[u8; 32],
    nonce_i: [u8; 32],
    nonce_r: [u8; 32],
) -> Result<(SecureChannel, SecureChannel), EnclaveError> {
    initiator.require("chan_send")?;
    responder.require("chan_recv")?;
    let evidence = crypto::respond(responder.measurement(), psk_responder, &nonce_i, nonce_r);
    crypto::verify(&evidence, psk_initiator, &nonce_i, expected)?;
    let ik = crypto::session_keys(psk_initiator, &nonce_i, &evidence.nonce_r, true);
    let rk = crypto::session_keys(psk_responder, &nonce_i, &nonce_r, false);
    Ok((SecureChannel::new(ik), SecureChannel::new(rk)))
}
